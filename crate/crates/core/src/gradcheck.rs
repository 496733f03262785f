//! Central finite-difference checks of analytic gradients.
//!
//! A check replays a graph in `f64`: the builder closure is run once for the
//! analytic gradient, then twice per probed element with that element moved by
//! `±step`. The error of one element is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
//!
//! ReLU makes the checked functions piecewise smooth. A probe is only trusted
//! when both displaced evaluations keep every ReLU on the side it had at the
//! base point; otherwise the step shrinks, and a probe that never settles is
//! counted as skipped rather than compared.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-5;
/// Denominator floor; below it the error is effectively absolute.
pub const REL_FLOOR: f64 = 1e-3;
/// Smallest step tried when a probe straddles a ReLU kink.
pub const MIN_STEP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Probe at most this many elements per tensor (all when `None`).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
    pub training: bool,
    pub fault: Option<OpKind>,
    /// Combine steps `h` and `h/2` to cancel the `h^2` truncation term.
    pub richardson: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: STEP,
            max_per_tensor: None,
            seed: 0,
            training: true,
            fault: None,
            richardson: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub component: String,
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst element.
    pub worst: (String, usize),
    /// Analytic and numeric derivative at the worst element.
    pub worst_values: (f64, f64),
    pub probed: usize,
    /// Probes dropped because every step straddled a ReLU kink.
    pub skipped: usize,
}

impl CheckReport {
    /// Below tolerance, with at most one probe in ten lost to kinks.
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE && self.skipped * 10 <= self.probed + self.skipped
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A differentiable problem: stored parameters plus free inputs, and a builder
/// that turns them into a scalar.
pub struct Problem<'a> {
    pub name: String,
    pub params: Vec<Tensor<f64>>,
    pub param_names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a>,
}

impl<'a> Problem<'a> {
    pub fn new(
        name: impl Into<String>,
        store: Option<&ParamStore>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a,
    ) -> Self {
        let (params, param_names, kinds) = match store {
            Some(s) => (
                s.values(),
                s.entries().iter().map(|e| e.name.clone()).collect(),
                s.entries().iter().map(|e| e.kind).collect(),
            ),
            None => (Vec::new(), Vec::new(), Vec::new()),
        };
        Self {
            name: name.into(),
            params,
            param_names,
            kinds,
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(
        &self,
        params: &[Tensor<f64>],
        inputs: &[Tensor<f64>],
        opts: &CheckOptions,
    ) -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::with_values(params.to_vec(), self.kinds.clone(), opts.training);
        g.inject_fault(opts.fault);
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.input(t.clone().with_requires_grad(true)))
            .collect();
        let loss = (self.build)(&mut g, &vars)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::contract(format!("{}: builder must return a scalar", self.name)));
        }
        Ok((g, vars, loss))
    }

    pub fn check(&self, opts: &CheckOptions) -> Result<CheckReport> {
        let (mut g, vars, loss) = self.eval(&self.params, &self.inputs, opts)?;
        g.backward(loss)?;
        let base = g.relu_pattern();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut report = CheckReport {
            component: self.name.clone(),
            max_rel_error: 0.0,
            worst: (String::new(), 0),
            worst_values: (0.0, 0.0),
            probed: 0,
            skipped: 0,
        };

        // (is_param, tensor index)
        let mut targets: Vec<(bool, usize)> = Vec::new();
        for (i, k) in self.kinds.iter().enumerate() {
            if k.trainable() {
                targets.push((true, i));
            }
        }
        targets.extend((0..self.inputs.len()).map(|i| (false, i)));

        for (is_param, ti) in targets {
            let (analytic, numel, label) = if is_param {
                let id = crate::params::ParamId(ti);
                let n = self.params[ti].numel();
                // a parameter the loss never touched has zero gradient
                let grad = g.param_grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
                (grad, n, self.param_names[ti].clone())
            } else {
                let n = self.inputs[ti].numel();
                let grad = g.grad(vars[ti]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
                (grad, n, format!("input{ti}"))
            };
            let probes: Vec<usize> = match opts.max_per_tensor {
                Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
                _ => (0..numel).collect(),
            };
            for idx in probes {
                let Some(numeric) = self.numeric(is_param, ti, idx, &base, opts)? else {
                    report.skipped += 1;
                    continue;
                };
                let err = relative_error(analytic[idx], numeric);
                report.probed += 1;
                if err > report.max_rel_error || !err.is_finite() {
                    report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                    report.worst = (label.clone(), idx);
                    report.worst_values = (analytic[idx], numeric);
                }
            }
        }
        Ok(report)
    }

    /// Central difference at one element. A probe whose `+step` or `-step`
    /// evaluation switches any ReLU is retried at a tenth of the step; `None`
    /// means every step down to [`MIN_STEP`] straddled a kink.
    fn numeric(&self, is_param: bool, ti: usize, idx: usize, base: &[bool], opts: &CheckOptions) -> Result<Option<f64>> {
        let value_at = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut params = self.params.clone();
            let mut inputs = self.inputs.clone();
            let t = if is_param { &mut params[ti] } else { &mut inputs[ti] };
            t.data_mut()[idx] += delta;
            let (g, _, loss) = self.eval(&params, &inputs, opts)?;
            Ok((g.value(loss).item(), g.relu_pattern()))
        };
        let central = |step: f64| -> Result<Option<f64>> {
            let (plus, pp) = value_at(step)?;
            let (minus, pm) = value_at(-step)?;
            Ok((pp == base && pm == base).then(|| (plus - minus) / (2.0 * step)))
        };
        let mut step = opts.step;
        while step >= MIN_STEP {
            if let Some(d) = central(step)? {
                if !opts.richardson {
                    return Ok(Some(d));
                }
                // the pattern is only known at the segment ends, so the half step is checked too
                if let Some(half) = central(step / 2.0)? {
                    return Ok(Some((4.0 * half - d) / 3.0));
                }
            }
            step /= 10.0;
        }
        Ok(None)
    }
}

/// Deterministic pseudo-random tensor in `[-1, 1)` for checks and oracles.
pub fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Reduces `out` to a scalar through a fixed random projection, so every
/// output element contributes a distinct weight to the checked gradient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random_tensor(g.shape(out), seed ^ 0x9e37_79b9));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Randomizes every trainable parameter to `[-1, 1)` so zero-initialized
/// biases and unit scales do not hide errors.
pub fn randomize_trainable(store: &mut ParamStore, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).kind.trainable()).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
}

struct Case<'a> {
    problem: Problem<'a>,
    training: bool,
    max_per_tensor: Option<usize>,
}

impl<'a> Case<'a> {
    fn new(problem: Problem<'a>) -> Self {
        Self {
            problem,
            training: true,
            max_per_tensor: None,
        }
    }

    fn eval(mut self) -> Self {
        self.training = false;
        self
    }

    fn sampled(mut self, k: usize) -> Self {
        self.max_per_tensor = Some(k);
        self
    }
}

/// Gradient checks for every op, every layer, the context heads and the full
/// model under the hybrid loss. Deterministic in `seed`.
pub fn suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    use crate::baselines::{DappmHead, PpmHead};
    use crate::frm::{aggregate_stages, DnlBlock, FeaturePyramid, FfnBlock, FrmConfig, FrmHead};
    use crate::kernels::ConvSpec;
    use crate::layers::{BatchNorm2d, Conv2d, ConvBnRelu, ConvConfig};
    use crate::losses::{hybrid_loss, LossConfig};
    use crate::model::{ContextHeadKind, Mode, ModelConfig, SegModel};

    let r = |shape: Shape, k: u64| random_tensor(shape, seed.wrapping_mul(1000).wrapping_add(k));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer_store = |build: &mut dyn FnMut(&mut ParamStore, &mut ChaCha8Rng)| {
        let mut store = ParamStore::new();
        build(&mut store, &mut rng);
        randomize_trainable(&mut store, seed ^ 0xabcd);
        store
    };
    let mut cases: Vec<Case> = Vec::new();

    cases.push(Case::new(Problem::new(
        "matmul",
        None,
        vec![r([2, 1, 3, 4], 1), r([2, 1, 4, 5], 2)],
        move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, seed)
        },
    )));
    cases.push(Case::new(Problem::new("softmax", None, vec![r([2, 3, 2, 4], 3)], move |g, v| {
        let a = g.softmax(v[0], 3)?;
        let b = g.softmax(v[0], 1)?;
        let y = g.add(a, b)?;
        project(g, y, seed)
    })));
    cases.push(Case::new(Problem::new(
        "elementwise",
        None,
        vec![r([2, 3, 2, 2], 4), r([1, 3, 1, 1], 5), r([2, 3, 2, 2], 6)],
        move |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.mul(a, v[2])?;
            let c = g.sub(b, v[1])?;
            let d = g.scale(c, 1.7);
            let e = g.add_scalar(d, -0.3);
            let f = g.mul(e, v[1])?;
            project(g, f, seed)
        },
    )));
    cases.push(Case::new(Problem::new("reductions", None, vec![r([2, 3, 4, 2], 7)], move |g, v| {
        let a = g.sum_axis(v[0], 3)?;
        let b = g.mean_axis(v[0], 1)?;
        let sq = g.mul(v[0], v[0])?;
        let c = g.mean(sq);
        let pa = project(g, a, seed)?;
        let pb = project(g, b, seed + 1)?;
        let s = g.add(pa, pb)?;
        g.add(s, c)
    })));
    cases.push(Case::new(Problem::new(
        "layout",
        None,
        vec![r([2, 3, 2, 4], 8), r([2, 1, 2, 4], 9)],
        move |g, v| {
            let a = g.permute(v[0], [0, 2, 1, 3])?;
            let a = g.reshape(a, [2, 1, 6, 4])?;
            let a = g.transpose(a)?;
            let a = g.reshape(a, [2, 3, 2, 4])?;
            let c = g.concat_channels(&[a, v[1], v[0]])?;
            project(g, c, seed)
        },
    )));
    cases.push(Case::new(Problem::new("relu", None, vec![r([2, 3, 3, 3], 10)], move |g, v| {
        let y = g.relu(v[0]);
        project(g, y, seed)
    })));

    let mut conv_layer = None;
    let store = layer_store(&mut |s, rng| {
        conv_layer = Some(Conv2d::new(s, "conv", 3, 4, ConvConfig::k3(2), rng).unwrap());
    });
    let conv = conv_layer.unwrap();
    cases.push(Case::new(Problem::new("conv3x3_stride2", Some(&store), vec![r([2, 3, 5, 6], 11)], move |g, v| {
        let y = conv.forward(g, v[0])?;
        project(g, y, seed)
    })));

    let mut dw_layer = None;
    let store = layer_store(&mut |s, rng| {
        dw_layer = Some(Conv2d::new(s, "dw", 4, 4, ConvConfig::depthwise3(4), rng).unwrap());
    });
    let dw = dw_layer.unwrap();
    cases.push(Case::new(Problem::new("conv_depthwise", Some(&store), vec![r([1, 4, 6, 6], 12)], move |g, v| {
        let y = dw.forward(g, v[0])?;
        project(g, y, seed)
    })));

    let mut pw_layer = None;
    let store = layer_store(&mut |s, rng| {
        pw_layer = Some(Conv2d::new(s, "pw", 5, 3, ConvConfig::pointwise(), rng).unwrap());
    });
    let pw = pw_layer.unwrap();
    cases.push(Case::new(Problem::new("conv1x1_bias", Some(&store), vec![r([2, 5, 3, 4], 13)], move |g, v| {
        let y = pw.forward(g, v[0])?;
        project(g, y, seed)
    })));
    cases.push(Case::new(Problem::new(
        "conv_grouped_padded",
        None,
        vec![r([1, 4, 5, 5], 14), r([6, 2, 3, 3], 15), r([1, 6, 1, 1], 16)],
        move |g, v| {
            let spec = ConvSpec { stride: 2, pad: 2, groups: 2 };
            let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
            project(g, y, seed)
        },
    )));

    let mut bn_layer = None;
    let store = layer_store(&mut |s, _| bn_layer = Some(BatchNorm2d::new(s, "bn", 3)));
    let bn = bn_layer.unwrap();
    let bn2 = bn.clone();
    cases.push(Case::new(Problem::new("batch_norm_train", Some(&store), vec![r([2, 3, 3, 3], 17)], move |g, v| {
        let y = bn.forward(g, v[0])?;
        project(g, y, seed)
    })));
    cases.push(
        Case::new(Problem::new("batch_norm_eval", Some(&store), vec![r([2, 3, 3, 3], 18)], move |g, v| {
            let y = bn2.forward(g, v[0])?;
            project(g, y, seed)
        }))
        .eval(),
    );

    let mut cbr_layer = None;
    let store = layer_store(&mut |s, rng| cbr_layer = Some(ConvBnRelu::new(s, "cbr", 3, 4, 2, rng).unwrap()));
    let cbr = cbr_layer.unwrap();
    cases.push(Case::new(Problem::new("conv_bn_relu", Some(&store), vec![r([2, 3, 6, 6], 19)], move |g, v| {
        let y = cbr.forward(g, v[0])?;
        project(g, y, seed)
    })));

    cases.push(Case::new(Problem::new("avg_pool", None, vec![r([2, 3, 7, 5], 20)], move |g, v| {
        let a = g.adaptive_avg_pool(v[0], 3, 2)?;
        project(g, a, seed)
    })));
    cases.push(Case::new(Problem::new("upsample", None, vec![r([2, 3, 3, 2], 21)], move |g, v| {
        let a = g.upsample_bilinear(v[0], 7, 5)?;
        project(g, a, seed)
    })));
    cases.push(Case::new(Problem::new("l2_normalize", None, vec![r([2, 4, 3, 2], 22)], move |g, v| {
        let a = g.l2_normalize_channels(v[0]);
        project(g, a, seed)
    })));

    let ce_labels: Vec<u8> = (0..2 * 3 * 3).map(|i| if i % 5 == 4 { 255 } else { (i % 4) as u8 }).collect();
    cases.push(Case::new(Problem::new("cross_entropy", None, vec![r([2, 4, 3, 3], 23)], move |g, v| {
        Ok(g.cross_entropy(v[0], &ce_labels, 255)?.0)
    })));

    // embeddings at stride 2 of the label grid; three classes, ignored pixels
    let hy_labels: Vec<u8> = (0..2 * 8 * 8)
        .map(|i| match (i / 8 % 8 / 3, i % 8 / 4) {
            (0, _) => 0,
            (1, 0) => 1,
            (1, _) => 255,
            _ => 2,
        })
        .collect();
    let loss_cfg = LossConfig {
        anchors_per_class: 4,
        max_positives: 2,
        max_negatives: 5,
        ..Default::default()
    };
    let lc = loss_cfg.clone();
    cases.push(Case::new(Problem::new(
        "hybrid_loss",
        None,
        vec![r([2, 3, 8, 8], 24), r([2, 4, 4, 4], 25)],
        move |g, v| {
            let mut srng = ChaCha8Rng::seed_from_u64(seed);
            Ok(hybrid_loss(g, v[0], Some(v[1]), &hy_labels, &lc, &mut srng)?.total)
        },
    )));

    cases.push(Case::new(Problem::new(
        "aggregate",
        None,
        vec![r([1, 2, 8, 8], 26), r([1, 2, 4, 4], 27), r([1, 3, 2, 2], 28), r([1, 2, 1, 1], 29)],
        move |g, v| {
            let p = FeaturePyramid { f1: v[0], f2: v[1], f3: v[2], f4: v[3] };
            let y = aggregate_stages(g, &p)?;
            project(g, y, seed)
        },
    )));

    let mut dnl_layer = None;
    let store = layer_store(&mut |s, rng| dnl_layer = Some(DnlBlock::new(s, "dnl", 8, 4, rng).unwrap()));
    let dnl = dnl_layer.unwrap();
    cases.push(Case::new(Problem::new("dnl", Some(&store), vec![r([2, 8, 3, 3], 30)], move |g, v| {
        let y = dnl.forward(g, v[0])?;
        project(g, y, seed)
    })));

    let mut ffn_layer = None;
    let store = layer_store(&mut |s, rng| ffn_layer = Some(FfnBlock::new(s, "ffn", 4, 2, rng).unwrap()));
    let ffn = ffn_layer.unwrap();
    cases.push(Case::new(Problem::new("ffn", Some(&store), vec![r([2, 4, 3, 3], 31)], move |g, v| {
        let y = ffn.forward(g, v[0])?;
        project(g, y, seed)
    })));

    let mut frm_layer = None;
    let store = layer_store(&mut |s, rng| {
        frm_layer = Some(FrmHead::new(s, "frm", 9, 5, FrmConfig { attn_reduction: 4, ffn_ratio: 2 }, rng).unwrap())
    });
    let frm = frm_layer.unwrap();
    cases.push(Case::new(Problem::new(
        "frm_head",
        Some(&store),
        vec![r([1, 2, 8, 8], 32), r([1, 2, 4, 4], 33), r([1, 3, 2, 2], 34), r([1, 2, 1, 1], 35)],
        move |g, v| {
            let p = FeaturePyramid { f1: v[0], f2: v[1], f3: v[2], f4: v[3] };
            let y = frm.forward(g, &p)?;
            project(g, y, seed)
        },
    )));

    let mut ppm_layer = None;
    let store = layer_store(&mut |s, rng| ppm_layer = Some(PpmHead::new(s, "ppm", 4, 2, 3, &[1, 2, 3], rng).unwrap()));
    let ppm = ppm_layer.unwrap();
    cases.push(Case::new(Problem::new("ppm", Some(&store), vec![r([2, 4, 3, 4], 36)], move |g, v| {
        let y = ppm.forward(g, v[0])?;
        project(g, y, seed)
    })));

    let mut dappm_layer = None;
    let store = layer_store(&mut |s, rng| {
        dappm_layer = Some(DappmHead::new(s, "dappm", 4, 2, 3, &[2, 4], true, rng).unwrap())
    });
    let dappm = dappm_layer.unwrap();
    cases.push(Case::new(Problem::new("dappm", Some(&store), vec![r([2, 4, 5, 4], 37)], move |g, v| {
        let y = dappm.forward(g, v[0])?;
        project(g, y, seed)
    })));

    let model = SegModel::new(ModelConfig {
        plan: [4, 4, 6, 8],
        decoder_width: 6,
        num_classes: 3,
        embed_dim: 4,
        context_head: ContextHeadKind::Frm,
        frm: FrmConfig { attn_reduction: 4, ffn_ratio: 2 },
        init_seed: seed,
        ..Default::default()
    })?;
    let mut model = model;
    randomize_trainable(&mut model.store, seed ^ 0x51de);
    let model_labels: Vec<u8> = (0..2 * 32 * 32)
        .map(|i| {
            let (y, x) = (i / 32 % 32, i % 32);
            if x < 12 { 0 } else if y < 16 { 1 } else { 2 }
        })
        .collect();
    let model_store = model.store.clone();
    cases.push(
        Case::new(Problem::new("full_model", Some(&model_store), vec![r([2, 3, 32, 32], 38)], move |g, v| {
            let out = model.forward(g, v[0], Mode::Train)?;
            let mut srng = ChaCha8Rng::seed_from_u64(seed);
            Ok(hybrid_loss(g, out.logits, out.embeddings, &model_labels, &loss_cfg, &mut srng)?.total)
        }))
        .sampled(4),
    );

    cases
        .into_iter()
        .map(|c| {
            c.problem.check(&CheckOptions {
                max_per_tensor: c.max_per_tensor,
                seed,
                training: c.training,
                fault,
                ..Default::default()
            })
        })
        .collect()
}
