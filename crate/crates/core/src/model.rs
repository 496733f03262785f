//! End-to-end segmentation network.
//!
//! ```text
//! image -> backbone -> {F1..F4} -> aggregate -> context head (FRM | PPM | DAPPM)
//!       -> FPN decoder (top-down from the context output, laterals from F3, F2, F1)
//!       -> classifier -> bilinear upsample to the input size
//!                     \-> embedding head (training only)
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{BinPolicy, DappmHead, PpmHead};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::frm::{aggregate_stages, FeaturePyramid, FrmConfig, FrmHead};
use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, ConvBnRelu, ConvConfig};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MIN_INPUT_EXTENT: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextHeadKind {
    Frm,
    Ppm,
    Dappm,
}

impl ContextHeadKind {
    pub const ALL: [ContextHeadKind; 3] = [ContextHeadKind::Frm, ContextHeadKind::Ppm, ContextHeadKind::Dappm];
}

impl fmt::Display for ContextHeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextHeadKind::Frm => "frm",
            ContextHeadKind::Ppm => "ppm",
            ContextHeadKind::Dappm => "dappm",
        })
    }
}

impl FromStr for ContextHeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frm" => Ok(ContextHeadKind::Frm),
            "ppm" => Ok(ContextHeadKind::Ppm),
            "dappm" => Ok(ContextHeadKind::Dappm),
            other => Err(Error::config(format!("unknown context head {other:?} (frm, ppm, dappm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Stage channels C1..C4.
    pub plan: [usize; 4],
    pub decoder_width: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub context_head: ContextHeadKind,
    pub frm: FrmConfig,
    pub ppm_bins: Vec<usize>,
    pub ppm_width: usize,
    pub dappm_width: usize,
    pub dappm_strides: Vec<usize>,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            plan: [16, 32, 64, 128],
            decoder_width: 128,
            num_classes: 19,
            embed_dim: 64,
            context_head: ContextHeadKind::Frm,
            frm: FrmConfig::default(),
            ppm_bins: vec![1, 2, 3, 6],
            ppm_width: 64,
            dappm_width: 64,
            dappm_strides: vec![2, 4, 8],
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn concat_channels(&self) -> usize {
        self.plan.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.plan.contains(&0) || self.decoder_width == 0 || self.embed_dim == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!("num_classes {} outside [2, 255]", self.num_classes)));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(p) = kv.list::<usize>("plan")? {
            self.plan = p
                .try_into()
                .map_err(|p: Vec<usize>| Error::config(format!("plan needs 4 entries, got {}", p.len())))?;
        }
        kv.set(&mut self.decoder_width, "decoder_width")?;
        kv.set(&mut self.num_classes, "num_classes")?;
        kv.set(&mut self.embed_dim, "embed_dim")?;
        kv.set(&mut self.context_head, "context_head")?;
        kv.set(&mut self.frm.attn_reduction, "attn_reduction")?;
        kv.set(&mut self.frm.ffn_ratio, "ffn_ratio")?;
        if let Some(b) = kv.list("ppm_bins")? {
            self.ppm_bins = b;
        }
        kv.set(&mut self.ppm_width, "ppm_width")?;
        kv.set(&mut self.dappm_width, "dappm_width")?;
        if let Some(s) = kv.list("dappm_strides")? {
            self.dappm_strides = s;
        }
        kv.set(&mut self.init_seed, "init_seed")?;
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv = KeyValues::default();
        kv.insert("plan", join(&self.plan));
        kv.insert("decoder_width", self.decoder_width);
        kv.insert("num_classes", self.num_classes);
        kv.insert("embed_dim", self.embed_dim);
        kv.insert("context_head", self.context_head);
        kv.insert("attn_reduction", self.frm.attn_reduction);
        kv.insert("ffn_ratio", self.frm.ffn_ratio);
        kv.insert("ppm_bins", join(&self.ppm_bins));
        kv.insert("ppm_width", self.ppm_width);
        kv.insert("dappm_width", self.dappm_width);
        kv.insert("dappm_strides", join(&self.dappm_strides));
        kv.insert("init_seed", self.init_seed);
        kv
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: [ConvBnRelu; 2],
    /// Per stage: optional stride-2 entry block, then a stride-1 block.
    pub stages: Vec<(Option<ConvBnRelu>, ConvBnRelu)>,
    pub plan: [usize; 4],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, plan: [usize; 4], rng: &mut ChaCha8Rng) -> Result<Self> {
        let stem_width = (plan[0] / 2).max(1);
        let stem = [
            ConvBnRelu::new(store, "backbone.stem.0", 3, stem_width, 2, rng)?,
            ConvBnRelu::new(store, "backbone.stem.1", stem_width, plan[0], 2, rng)?,
        ];
        let mut stages = vec![(None, ConvBnRelu::new(store, "backbone.stage1.conv", plan[0], plan[0], 1, rng)?)];
        for k in 1..4 {
            let down = ConvBnRelu::new(store, &format!("backbone.stage{}.down", k + 1), plan[k - 1], plan[k], 2, rng)?;
            let conv = ConvBnRelu::new(store, &format!("backbone.stage{}.conv", k + 1), plan[k], plan[k], 1, rng)?;
            stages.push((Some(down), conv));
        }
        Ok(Self { stem, stages, plan })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, image: Var) -> Result<FeaturePyramid> {
        let s = g.shape(image);
        if s[1] != 3 {
            return Err(Error::dim("backbone image channels", &s, &[3]));
        }
        if s[2] < MIN_INPUT_EXTENT || s[3] < MIN_INPUT_EXTENT {
            return Err(Error::contract(format!(
                "input {}x{} smaller than {MIN_INPUT_EXTENT}x{MIN_INPUT_EXTENT}",
                s[2], s[3]
            )));
        }
        let mut x = self.stem[0].forward(g, image)?;
        x = self.stem[1].forward(g, x)?;
        let mut outs = Vec::with_capacity(4);
        for (down, conv) in &self.stages {
            if let Some(d) = down {
                x = d.forward(g, x)?;
            }
            x = conv.forward(g, x)?;
            outs.push(x);
        }
        let p = FeaturePyramid {
            f1: outs[0],
            f2: outs[1],
            f3: outs[2],
            f4: outs[3],
        };
        p.validate(g)?;
        Ok(p)
    }

    pub fn blocks(&self) -> Vec<&ConvBnRelu> {
        let mut v: Vec<&ConvBnRelu> = self.stem.iter().collect();
        for (d, c) in &self.stages {
            v.extend(d.iter());
            v.push(c);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub enum ContextHead {
    Frm(FrmHead),
    Ppm(PpmHead),
    Dappm(DappmHead),
}

impl ContextHead {
    pub fn kind(&self) -> ContextHeadKind {
        match self {
            ContextHead::Frm(_) => ContextHeadKind::Frm,
            ContextHead::Ppm(_) => ContextHeadKind::Ppm,
            ContextHead::Dappm(_) => ContextHeadKind::Dappm,
        }
    }

    /// Maps the concatenated multi-stage feature to `decoder_width` channels.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, fc: Var) -> Result<Var> {
        match self {
            ContextHead::Frm(h) => h.refine(g, fc),
            ContextHead::Ppm(h) => h.forward(g, fc),
            ContextHead::Dappm(h) => h.forward(g, fc),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ContextHead::Frm(h) => h.param_count(),
            ContextHead::Ppm(h) => h.param_count(),
            ContextHead::Dappm(h) => h.param_count(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FpnDecoder {
    /// Laterals for F1, F2, F3.
    pub laterals: [Conv2d; 3],
    pub smooth: [ConvBnRelu; 3],
    pub classifier: Conv2d,
    pub width: usize,
}

impl FpnDecoder {
    pub fn new(store: &mut ParamStore, plan: [usize; 4], width: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let pw = ConvConfig::pointwise();
        let lateral = |store: &mut ParamStore, rng: &mut ChaCha8Rng, k: usize| {
            Conv2d::new(store, &format!("decoder.lateral{}", k + 1), plan[k], width, pw, rng)
        };
        let smooth = |store: &mut ParamStore, rng: &mut ChaCha8Rng, k: usize| {
            ConvBnRelu::new(store, &format!("decoder.smooth{}", k + 1), width, width, 1, rng)
        };
        Ok(Self {
            laterals: [lateral(store, rng, 0)?, lateral(store, rng, 1)?, lateral(store, rng, 2)?],
            smooth: [smooth(store, rng, 0)?, smooth(store, rng, 1)?, smooth(store, rng, 2)?],
            classifier: Conv2d::new(store, "decoder.classifier", width, classes, pw, rng)?,
            width,
        })
    }

    /// Top-down pathway seeded by the context output; returns stride-4 features.
    pub fn features<E: Element>(&self, g: &mut Graph<E>, p: &FeaturePyramid, context: Var) -> Result<Var> {
        let lateral_inputs = [p.f1, p.f2, p.f3];
        let mut top = context;
        for k in (0..3).rev() {
            let lat = self.laterals[k].forward(g, lateral_inputs[k])?;
            let [_, _, h, w] = g.shape(lat);
            let up = g.upsample_bilinear(top, h, w)?;
            let merged = g.add(lat, up)?;
            top = self.smooth[k].forward(g, merged)?;
        }
        Ok(top)
    }

    pub fn logits<E: Element>(&self, g: &mut Graph<E>, features: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.classifier.forward(g, features)?;
        g.upsample_bilinear(y, h, w)
    }
}

/// One 1x1 convolution from decoder features to the embedding space.
#[derive(Clone, Debug)]
pub struct EmbeddingHead {
    pub conv: Conv2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    /// Present iff the forward ran in [`Mode::Train`].
    pub embeddings: Option<Var>,
    pub pyramid: FeaturePyramid,
    pub context: Var,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub context: ContextHead,
    pub decoder: FpnDecoder,
    pub embed: EmbeddingHead,
}

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.plan, &mut rng)?;
        let cin = config.concat_channels();
        let dw = config.decoder_width;
        let context = match config.context_head {
            ContextHeadKind::Frm => ContextHead::Frm(FrmHead::new(&mut store, "context", cin, dw, config.frm, &mut rng)?),
            ContextHeadKind::Ppm => {
                let mut h = PpmHead::new(&mut store, "context", cin, config.ppm_width, dw, &config.ppm_bins, &mut rng)?;
                h.bin_policy = BinPolicy::Clamp;
                ContextHead::Ppm(h)
            }
            ContextHeadKind::Dappm => ContextHead::Dappm(DappmHead::new(
                &mut store,
                "context",
                cin,
                config.dappm_width,
                dw,
                &config.dappm_strides,
                true,
                &mut rng,
            )?),
        };
        let decoder = FpnDecoder::new(&mut store, config.plan, dw, config.num_classes, &mut rng)?;
        let embed = EmbeddingHead {
            conv: Conv2d::new(&mut store, "embed_head", dw, config.embed_dim, ConvConfig::pointwise(), &mut rng)?,
        };
        Ok(Self {
            config,
            store,
            backbone,
            context,
            decoder,
            embed,
        })
    }

    /// Records the forward pass. Batch norm follows the graph's training flag;
    /// `mode` decides whether the embedding head runs.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, image: Var, mode: Mode) -> Result<ModelOutput> {
        let [_, _, h, w] = g.shape(image);
        let pyramid = self.backbone.forward(g, image)?;
        let fc = aggregate_stages(g, &pyramid)?;
        let context = self.context.forward(g, fc)?;
        let features = self.decoder.features(g, &pyramid, context)?;
        let logits = self.decoder.logits(g, features, h, w)?;
        let embeddings = match mode {
            Mode::Train => Some(self.embed.conv.forward(g, features)?),
            Mode::Infer => None,
        };
        Ok(ModelOutput {
            logits,
            embeddings,
            pyramid,
            context,
            features,
        })
    }

    /// Inference-mode logits for a batch of images.
    pub fn infer_logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::from_store(&self.store, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x, Mode::Infer)?;
        Ok(g.value(out.logits).clone())
    }

    /// Per-pixel argmax labels, `N x H x W`.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<u8>> {
        Ok(argmax_channels(&self.infer_logits(images)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.config.to_kv().write(&dir.join("config.txt"))?;
        self.store.save(&dir.join("params.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("config.txt"))?;
        let mut config = ModelConfig::default();
        config.apply(&kv)?;
        let mut model = Self::new(config)?;
        model.store.load_into(&dir.join("params.bin"))?;
        Ok(model)
    }
}

/// Argmax over channels of `[N, K, H, W]`, first maximum wins.
pub fn argmax_channels(logits: &Tensor<f32>) -> Vec<u8> {
    let [n, k, h, w] = logits.shape();
    let mut out = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for p in 0..h * w {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..k {
                let v = logits.data()[(b * k + c) * h * w + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(head: ContextHeadKind) -> ModelConfig {
        ModelConfig {
            plan: [8, 16, 32, 64],
            decoder_width: 16,
            num_classes: 19,
            embed_dim: 8,
            context_head: head,
            ..Default::default()
        }
    }

    #[test]
    fn backbone_strides() {
        let m = SegModel::new(small(ContextHeadKind::Frm)).unwrap();
        for (size, expect) in [((64, 64), [(16, 16), (8, 8), (4, 4), (2, 2)]), ((96, 64), [(24, 16), (12, 8), (6, 4), (3, 2)])] {
            let mut g = Graph::<f32>::from_store(&m.store, false);
            let x = g.constant(Tensor::zeros([1, 3, size.0, size.1]));
            let p = m.backbone.forward(&mut g, x).unwrap();
            let got: Vec<(usize, usize)> = p.stages().iter().map(|&v| (g.shape(v)[2], g.shape(v)[3])).collect();
            assert_eq!(got, expect);
            assert_eq!(p.channels(&g), [8, 16, 32, 64]);
        }
    }

    #[test]
    fn undersized_input_rejected() {
        let m = SegModel::new(small(ContextHeadKind::Frm)).unwrap();
        let mut g = Graph::<f32>::from_store(&m.store, false);
        let x = g.constant(Tensor::zeros([1, 3, 31, 64]));
        assert!(matches!(m.forward(&mut g, x, Mode::Infer), Err(Error::Contract(_))));
    }

    #[test]
    fn config_round_trip() {
        let mut c = small(ContextHeadKind::Dappm);
        c.ppm_bins = vec![1, 3];
        let mut back = ModelConfig::default();
        back.apply(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert!("fpn".parse::<ContextHeadKind>().is_err());
    }

    #[test]
    fn argmax_first_max_wins() {
        let t = Tensor::new([1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}
