//! SGD training loop: momentum SGD with poly decay, random flip/rescale/crop
//! augmentation, periodic evaluation, metrics logging and resumable checkpoints.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::datagen::SegBatch;
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::apply_bn_updates;
use crate::losses::{hybrid_loss, LossConfig};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::model::{Mode, ModelConfig, SegModel};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::Graph;

/// Keys owned by the trainer itself; model and loss keys are accepted too.
const TRAIN_KEYS: [&str; 14] = [
    "lr0",
    "momentum",
    "weight_decay",
    "iters",
    "poly_power",
    "crop",
    "batch",
    "seed",
    "scale_min",
    "scale_max",
    "flip_prob",
    "log_every",
    "eval_every",
    "val_count",
];

const MODEL_KEYS: [&str; 12] = [
    "plan",
    "decoder_width",
    "num_classes",
    "embed_dim",
    "context_head",
    "attn_reduction",
    "ffn_ratio",
    "ppm_bins",
    "ppm_width",
    "dappm_width",
    "dappm_strides",
    "init_seed",
];

const LOSS_KEYS: [&str; 6] = [
    "lambda",
    "tau",
    "ignore_index",
    "anchors_per_class",
    "max_positives",
    "max_negatives",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iters: usize,
    pub poly_power: f64,
    /// Square crop side after rescaling.
    pub crop: usize,
    pub batch: usize,
    pub seed: u64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub log_every: usize,
    /// Validation interval in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Trailing dataset items held out for validation.
    pub val_count: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            iters: 1000,
            poly_power: 0.9,
            crop: 64,
            batch: 8,
            seed: 0,
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
            log_every: 50,
            eval_every: 0,
            val_count: 64,
            model: ModelConfig {
                num_classes: 5,
                ..Default::default()
            },
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn known_keys() -> Vec<&'static str> {
        TRAIN_KEYS.iter().chain(&MODEL_KEYS).chain(&LOSS_KEYS).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch == 0 || self.crop < crate::model::MIN_INPUT_EXTENT {
            return Err(Error::config(format!(
                "batch must be positive and crop at least {}",
                crate::model::MIN_INPUT_EXTENT
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::config("scale range must satisfy 0 < scale_min <= scale_max"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(self.lr0 >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("flip_prob in [0, 1], lr0 >= 0 and momentum in [0, 1) required"));
        }
        Ok(())
    }

    /// Overrides fields present in `kv`; unknown keys are rejected.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(&Self::known_keys())?;
        kv.set(&mut self.lr0, "lr0")?;
        kv.set(&mut self.momentum, "momentum")?;
        kv.set(&mut self.weight_decay, "weight_decay")?;
        kv.set(&mut self.iters, "iters")?;
        kv.set(&mut self.poly_power, "poly_power")?;
        kv.set(&mut self.crop, "crop")?;
        kv.set(&mut self.batch, "batch")?;
        kv.set(&mut self.seed, "seed")?;
        kv.set(&mut self.scale_min, "scale_min")?;
        kv.set(&mut self.scale_max, "scale_max")?;
        kv.set(&mut self.flip_prob, "flip_prob")?;
        kv.set(&mut self.log_every, "log_every")?;
        kv.set(&mut self.eval_every, "eval_every")?;
        kv.set(&mut self.val_count, "val_count")?;
        self.model.apply(kv)?;
        self.loss.apply(kv)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("lr0", self.lr0);
        kv.insert("momentum", self.momentum);
        kv.insert("weight_decay", self.weight_decay);
        kv.insert("iters", self.iters);
        kv.insert("poly_power", self.poly_power);
        kv.insert("crop", self.crop);
        kv.insert("batch", self.batch);
        kv.insert("seed", self.seed);
        kv.insert("scale_min", self.scale_min);
        kv.insert("scale_max", self.scale_max);
        kv.insert("flip_prob", self.flip_prob);
        kv.insert("log_every", self.log_every);
        kv.insert("eval_every", self.eval_every);
        kv.insert("val_count", self.val_count);
        kv.merge(&self.model.to_kv());
        kv.merge(&self.loss.to_kv());
        kv
    }

    pub fn augment(&self) -> Augment {
        Augment {
            flip_prob: self.flip_prob,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            crop: (self.crop, self.crop),
            ignore_index: self.loss.ignore_index,
        }
    }
}

/// `lr0 * (1 - iter / total)^power`; iterations past `total` give 0.
pub fn poly_lr(lr0: f64, iter: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let progress = (iter as f64 / total as f64).min(1.0);
    lr0 * (1.0 - progress).powf(power)
}

/// Momentum SGD with weight decay folded into the gradient:
/// `v <- mu * v + g + wd * p`, then `p <- p - lr * v`. Decay only touches
/// [`ParamKind::Weight`] tensors.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    /// One buffer per parameter, indexed by `ParamId`; empty for buffers.
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .entries()
            .iter()
            .map(|e| if e.kind.trainable() { vec![0.0; e.value.numel()] } else { Vec::new() })
            .collect();
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity,
        }
    }

    /// `grads[i]` is the gradient of parameter `i`; every trainable parameter needs one.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&[f32]>], lr: f32) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (i, grad) in grads.iter().enumerate() {
            let id = ParamId(i);
            let kind = store.get(id).kind;
            if !kind.trainable() {
                continue;
            }
            let g = grad.ok_or_else(|| Error::contract(format!("no gradient for {}", store.get(id).name)))?;
            let wd = if kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let v = &mut self.velocity[i];
            let p = store.value_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(Error::contract(format!("gradient length {} for {} values", g.len(), p.len())));
            }
            for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }

    fn to_store(&self, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (e, v) in params.entries().iter().zip(&self.velocity) {
            let t = if v.is_empty() {
                Tensor::zeros(e.value.shape())
            } else {
                Tensor::new(e.value.shape(), v.clone()).expect("velocity matches parameter")
            };
            out.add(e.name.clone(), e.kind, t);
        }
        out
    }

    fn load_from(&mut self, saved: &ParamStore) {
        for (i, v) in self.velocity.iter_mut().enumerate() {
            if !v.is_empty() {
                v.copy_from_slice(saved.value(ParamId(i)).data());
            }
        }
    }
}

/// Random horizontal flip, uniform rescale and crop with padding. Images pad
/// with 0 and labels with the ignore index.
#[derive(Clone, Debug, PartialEq)]
pub struct Augment {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop: (usize, usize),
    pub ignore_index: u8,
}

/// Reverses the columns of every `h x w` plane.
pub fn flip_horizontal<T: Copy>(planes: &mut [T], w: usize) {
    for row in planes.chunks_mut(w) {
        row.reverse();
    }
}

impl Augment {
    /// Transforms one `[1, 3, H, W]` image and its `H x W` labels.
    pub fn apply<R: Rng>(&self, image: &Tensor<f32>, labels: &[u8], rng: &mut R) -> (Tensor<f32>, Vec<u8>) {
        let [_, c, h, w] = image.shape();
        let mut img = image.data().to_vec();
        let mut lab = labels.to_vec();
        if rng.gen_bool(self.flip_prob) {
            flip_horizontal(&mut img, w);
            flip_horizontal(&mut lab, w);
        }
        let s = rng.gen_range(self.scale_min..=self.scale_max);
        let rh = ((h as f64 * s).round() as usize).max(1);
        let rw = ((w as f64 * s).round() as usize).max(1);
        if (rh, rw) != (h, w) {
            img = kernels::bilinear(&img, c, h, w, rh, rw);
            lab = kernels::resize_nearest(&lab, h, w, rh, rw);
        }
        let (ch, cw) = self.crop;
        let y0 = rng.gen_range(0..=rh.saturating_sub(ch));
        let x0 = rng.gen_range(0..=rw.saturating_sub(cw));
        let mut out = vec![0.0f32; c * ch * cw];
        let mut out_lab = vec![self.ignore_index; ch * cw];
        for y in 0..ch.min(rh - y0) {
            for x in 0..cw.min(rw - x0) {
                for k in 0..c {
                    out[(k * ch + y) * cw + x] = img[(k * rh + y0 + y) * rw + x0 + x];
                }
                out_lab[y * cw + x] = lab[(y0 + y) * rw + x0 + x];
            }
        }
        (Tensor::new([1, c, ch, cw], out).expect("crop buffer"), out_lab)
    }
}

/// Confusion matrix of inference-mode predictions, in chunks of `chunk` images.
pub fn confusion(model: &SegModel, batch: &SegBatch, ignore: u8, chunk: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    let n = batch.len();
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let part = batch.select(&(start..end).collect::<Vec<_>>());
        let pred = model.predict(&part.images)?;
        cm.accumulate(&pred, &part.labels, ignore)?;
        start = end;
    }
    Ok(cm)
}

pub fn evaluate(model: &SegModel, batch: &SegBatch, ignore: u8) -> Result<IouReport> {
    confusion(model, batch, ignore, 16)?.iou()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Iteration index of this step, starting at 0.
    pub iteration: usize,
    pub lr: f64,
    pub total: f32,
    pub ce: f32,
    pub cl: f32,
    pub anchors: usize,
}

/// One line of the metrics log: means over the last `log_every` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalRecord {
    /// Number of completed iterations.
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub cl: f64,
    pub anchors: f64,
    pub val_miou: Option<f64>,
}

pub const METRICS_HEADER: &str = "iteration,lr,loss,ce,cl,anchors,val_miou";

impl IntervalRecord {
    pub fn csv_row(&self) -> String {
        let miou = self.val_miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.1},{}",
            self.iteration, self.lr, self.loss, self.ce, self.cl, self.anchors, miou
        )
    }
}

/// Segments the loss curve is averaged over in `loss_curve.csv`.
pub const CURVE_SEGMENTS: usize = 5;

/// Means of `losses` over `segments` consecutive, equally sized runs of
/// steps, keyed by the last step of each run (1-based, offset by `start`).
pub fn smoothed_curve(losses: &[f32], segments: usize, start: usize) -> Vec<(usize, f64)> {
    let len = (losses.len() / segments.max(1)).max(1);
    losses
        .chunks(len)
        .scan(start, |end, chunk| {
            *end += chunk.len();
            let mean = chunk.iter().map(|&l| l as f64).sum::<f64>() / chunk.len() as f64;
            Some((*end, mean))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    /// Smoothed loss over the steps of this run, see [`smoothed_curve`].
    pub curve: Vec<(usize, f64)>,
    pub last: Option<StepStats>,
    pub records: Vec<IntervalRecord>,
    pub val: Option<IouReport>,
    pub seconds: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: SegModel,
    pub sgd: Sgd,
    /// Completed iterations.
    pub iteration: usize,
}

/// Independent generator for iteration `it`; makes resumed runs replay exactly.
fn iteration_rng(seed: u64, it: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(it as u64 + 1);
    rng
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SegModel::new(config.model.clone())?;
        let sgd = Sgd::new(&model.store, config.momentum, config.weight_decay);
        Ok(Self {
            config,
            model,
            sgd,
            iteration: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        let c = &self.config;
        poly_lr(c.lr0, self.iteration, c.iters, c.poly_power)
    }

    /// Draws a batch from `train`, augments it and applies one SGD update.
    pub fn step(&mut self, train: &SegBatch) -> Result<StepStats> {
        if train.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let cfg = &self.config;
        let mut rng = iteration_rng(cfg.seed, self.iteration);
        let picks = index::sample(&mut rng, train.len(), cfg.batch.min(train.len())).into_vec();
        let aug = cfg.augment();
        let (ch, cw) = aug.crop;
        let mut data = Vec::with_capacity(picks.len() * 3 * ch * cw);
        let mut labels = Vec::with_capacity(picks.len() * ch * cw);
        for &i in &picks {
            let item = train.select(&[i]);
            let (img, lab) = aug.apply(&item.images, &item.labels, &mut rng);
            data.extend_from_slice(img.data());
            labels.extend_from_slice(&lab);
        }
        let images = Tensor::new([picks.len(), 3, ch, cw], data)?;

        let lr = self.lr();
        let mut g = Graph::<f32>::from_store(&self.model.store, true);
        let x = g.constant(images);
        let out = self.model.forward(&mut g, x, Mode::Train)?;
        let report = hybrid_loss(&mut g, out.logits, out.embeddings, &labels, &cfg.loss, &mut rng)?;
        let (total, ce, cl) = report.values(&g);
        if !total.is_finite() {
            return Err(Error::contract(format!("non-finite loss at iteration {}", self.iteration)));
        }
        g.backward(report.total)?;
        // parameters recorded but cut off from the loss (an empty contrastive
        // term) have an exactly zero gradient
        let zeros: Vec<Vec<f32>> = self
            .model
            .store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        let grads: Vec<Option<&[f32]>> = self
            .model
            .store
            .ids()
            .map(|id| match g.param_grad(id) {
                Some(gr) => Some(gr),
                None if g.param_recorded(id) => Some(zeros[id.index()].as_slice()),
                None => None,
            })
            .collect();
        self.sgd.step(&mut self.model.store, &grads, lr as f32)?;
        drop(grads);
        apply_bn_updates(&mut self.model.store, &mut g);
        let stats = StepStats {
            iteration: self.iteration,
            lr,
            total: total as f32,
            ce: ce as f32,
            cl: cl as f32,
            anchors: report.anchors,
        };
        self.iteration += 1;
        Ok(stats)
    }

    /// Trains until `config.iters`, logging interval means and validating on
    /// `val` (if non-empty) every `eval_every` steps and at the end. With `out`,
    /// writes `metrics.csv`, a checkpoint and `summary.txt` there.
    pub fn run(
        &mut self,
        train: &SegBatch,
        val: &SegBatch,
        out: Option<&Path>,
        mut on_record: impl FnMut(&IntervalRecord),
    ) -> Result<TrainSummary> {
        let started = Instant::now();
        let ignore = self.config.loss.ignore_index;
        let mut csv = String::new();
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let existing = dir.join("metrics.csv");
            // resumed runs append to the log they started
            csv = match std::fs::read_to_string(&existing) {
                Ok(s) if self.iteration > 0 => s,
                _ => format!("{METRICS_HEADER}\n"),
            };
        }
        let mut records = Vec::new();
        let mut window: Vec<StepStats> = Vec::new();
        let mut last = None;
        let start = self.iteration;
        let mut losses = Vec::with_capacity(self.config.iters.saturating_sub(start));
        while self.iteration < self.config.iters {
            let s = self.step(train)?;
            losses.push(s.total);
            window.push(s);
            last = Some(s);
            let done = self.iteration;
            let log_now = self.config.log_every > 0 && done % self.config.log_every == 0;
            let eval_now = !val.is_empty() && self.config.eval_every > 0 && done % self.config.eval_every == 0;
            if log_now || eval_now || done == self.config.iters {
                let val_miou = if eval_now { Some(evaluate(&self.model, val, ignore)?.miou) } else { None };
                let n = window.len().max(1) as f64;
                let mean = |f: fn(&StepStats) -> f64| window.iter().map(f).sum::<f64>() / n;
                let rec = IntervalRecord {
                    iteration: done,
                    lr: s.lr,
                    loss: mean(|s| s.total as f64),
                    ce: mean(|s| s.ce as f64),
                    cl: mean(|s| s.cl as f64),
                    anchors: mean(|s| s.anchors as f64),
                    val_miou,
                };
                window.clear();
                on_record(&rec);
                let _ = writeln!(csv, "{}", rec.csv_row());
                records.push(rec);
            }
        }
        let report = if val.is_empty() { None } else { Some(evaluate(&self.model, val, ignore)?) };
        let seconds = started.elapsed().as_secs_f64();
        let curve = smoothed_curve(&losses, CURVE_SEGMENTS, start);
        if let Some(dir) = out {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            let mut text = String::from("iteration,smoothed_loss\n");
            for (it, l) in &curve {
                let _ = writeln!(text, "{it},{l:.6}");
            }
            let path = dir.join("loss_curve.csv");
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            self.save(dir)?;
            let mut summary = KeyValues::default();
            summary.insert("iterations", self.iteration);
            if let Some(s) = last {
                summary.insert("final_loss", s.total);
                summary.insert("final_ce", s.ce);
                summary.insert("final_cl", s.cl);
            }
            if let Some(r) = &report {
                summary.insert("val_miou", format!("{:.6}", r.miou));
            }
            summary.insert("seconds", format!("{seconds:.1}"));
            summary.write(&dir.join("summary.txt"))?;
        }
        Ok(TrainSummary {
            iterations: self.iteration,
            curve,
            last,
            records,
            val: report,
            seconds,
        })
    }

    /// Writes the model (`config.txt`, `params.bin`) plus `train.txt` and
    /// `momentum.bin` so training can resume.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let mut kv = self.config.to_kv();
        kv.insert("iteration", self.iteration);
        kv.write(&dir.join("train.txt"))?;
        self.sgd.to_store(&self.model.store).save(&dir.join("momentum.bin"))
    }

    /// Restores a checkpoint written by [`Trainer::save`]. `iters` may be
    /// raised to extend the schedule.
    pub fn resume(dir: &Path, iters: Option<usize>) -> Result<Self> {
        let path = dir.join("train.txt");
        let saved = KeyValues::read(&path)?;
        let iteration: usize = saved
            .parsed("iteration")?
            .ok_or_else(|| Error::format(&path, "missing iteration"))?;
        let mut kv = KeyValues::default();
        for k in saved.keys().filter(|k| *k != "iteration") {
            kv.insert(k, saved.get(k).unwrap_or_default());
        }
        let mut config = TrainConfig::default();
        config.apply(&kv)?;
        if let Some(n) = iters {
            config.iters = n;
        }
        let mut trainer = Trainer::new(config)?;
        trainer.model.store.load_into(&dir.join("params.bin"))?;
        let mut saved = trainer.model.store.clone();
        saved.load_into(&dir.join("momentum.bin"))?;
        trainer.sgd.load_from(&saved);
        trainer.iteration = iteration;
        Ok(trainer)
    }
}

/// Splits `0..n` into training indices and the trailing `val_count` held out.
pub fn split_indices(n: usize, val_count: usize) -> (Vec<usize>, Vec<usize>) {
    let cut = n.saturating_sub(val_count);
    ((0..cut).collect(), (cut..n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(0.01, 0, 1000, 0.9), 0.01);
        assert_eq!(poly_lr(0.01, 1000, 1000, 0.9), 0.0);
        assert!((poly_lr(0.01, 500, 1000, 0.9) - 0.005359).abs() < 1e-6);
        let lrs: Vec<f64> = (0..=50).map(|i| poly_lr(0.01, i, 50, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_store(p: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", ParamKind::Weight, Tensor::new([1, 1, 1, 1], vec![p]).unwrap());
        s
    }

    #[test]
    fn sgd_hand_iterations() {
        let mut s = scalar_store(1.0);
        let mut opt = Sgd::new(&s, 0.0, 0.0);
        opt.step(&mut s, &[Some(&[1.0])], 0.1).unwrap();
        assert!((s.value(ParamId(0)).item() - 0.9).abs() < 1e-7);

        let mut s = scalar_store(0.0);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        opt.step(&mut s, &[Some(&[1.0])], 0.1).unwrap();
        opt.step(&mut s, &[Some(&[1.0])], 0.1).unwrap();
        assert!((s.value(ParamId(0)).item() + 0.29).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_gradient_and_missing_gradient() {
        let mut s = scalar_store(0.7);
        s.add("b", ParamKind::NoDecay, Tensor::new([1, 1, 1, 1], vec![0.3]).unwrap());
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        opt.step(&mut s, &[Some(&[0.0]), Some(&[0.0])], 0.1).unwrap();
        assert_eq!(s.value(ParamId(0)).item(), 0.7);
        assert!(matches!(opt.step(&mut s, &[Some(&[0.0]), None], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut s = scalar_store(1.0);
        s.add("b", ParamKind::NoDecay, Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(&s, 0.0, 0.5);
        opt.step(&mut s, &[Some(&[0.0]), Some(&[0.0])], 0.1).unwrap();
        assert!((s.value(ParamId(0)).item() - 0.95).abs() < 1e-7);
        assert_eq!(s.value(ParamId(1)).item(), 1.0);
    }

    #[test]
    fn config_round_trip_and_unknown_key() {
        let mut c = TrainConfig::default();
        c.batch = 3;
        c.loss.tau = 0.2;
        c.model.context_head = crate::ContextHeadKind::Dappm;
        let mut back = TrainConfig::default();
        back.apply(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let bad = KeyValues::parse("bogus = 1").unwrap();
        assert!(matches!(TrainConfig::default().apply(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn curve_segments_average_steps() {
        let losses = [4.0, 2.0, 3.0, 1.0, 0.5, 0.5];
        assert_eq!(smoothed_curve(&losses, 3, 0), vec![(2, 3.0), (4, 2.0), (6, 0.5)]);
        assert_eq!(smoothed_curve(&losses[..2], 5, 10), vec![(11, 4.0), (12, 2.0)]);
    }

    #[test]
    fn split_holds_out_tail() {
        assert_eq!(split_indices(5, 2), (vec![0, 1, 2], vec![3, 4]));
        assert_eq!(split_indices(2, 5), (vec![], vec![0, 1]));
    }
}
