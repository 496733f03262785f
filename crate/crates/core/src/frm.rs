//! Feature refinement module: multi-stage aggregation, disentangled non-local
//! attention, feed-forward block and the channel cut.
//!
//! Data flow for a pyramid `{F1, F2, F3, F4}`:
//!
//! ```text
//! Fc = cat(pool(F1), pool(F2), pool(F3), F4)        pooled to F4's extent
//! y_i = sum_j [softmax_j((q_i - mu_q)^T (k_j - mu_k)) + softmax_j(m_j)] g(x_j)
//! x <- x + proj(y)
//! x <- x + reduce(relu(depthwise(expand(x))))
//! out = cut(x)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, ConvConfig};
use crate::params::ParamStore;
use crate::tensor::Element;

/// Backbone stage outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
}

fn halves(prev: usize, next: usize) -> bool {
    next == prev / 2 || next == prev.div_ceil(2)
}

impl FeaturePyramid {
    pub fn stages(&self) -> [Var; 4] {
        [self.f1, self.f2, self.f3, self.f4]
    }

    /// Checks shared batch extent and stage-to-stage halving.
    pub fn validate<E: Element>(&self, g: &Graph<E>) -> Result<()> {
        let shapes = self.stages().map(|v| g.shape(v));
        for pair in shapes.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a[0] != b[0] {
                return Err(Error::dim("pyramid batch", &a, &b));
            }
            if !halves(a[2], b[2]) || !halves(a[3], b[3]) {
                return Err(Error::dim("pyramid stride", &a, &b));
            }
        }
        Ok(())
    }

    pub fn channels<E: Element>(&self, g: &Graph<E>) -> [usize; 4] {
        self.stages().map(|v| g.shape(v)[1])
    }
}

/// Pools F1..F3 to F4's spatial extent and concatenates F1, F2, F3, F4 along channels.
pub fn aggregate_stages<E: Element>(g: &mut Graph<E>, p: &FeaturePyramid) -> Result<Var> {
    p.validate(g)?;
    let s4 = g.shape(p.f4);
    let mut parts = Vec::with_capacity(4);
    for f in [p.f1, p.f2, p.f3] {
        parts.push(g.adaptive_avg_pool(f, s4[2], s4[3])?);
    }
    parts.push(p.f4);
    g.concat_channels(&parts)
}

/// Disentangled non-local block with output projection and residual.
#[derive(Clone, Debug)]
pub struct DnlBlock {
    pub query: Conv2d,
    pub key: Conv2d,
    pub unary: Conv2d,
    pub value: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
    pub reduced: usize,
    pub residual: bool,
}

/// Per-pixel maps produced by the DNL transforms.
#[derive(Clone, Copy, Debug)]
pub struct DnlMaps {
    pub q: Var,
    pub k: Var,
    pub m: Var,
    pub v: Var,
}

impl DnlBlock {
    /// `reduction` divides the channel count for queries and keys (floor).
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let reduced = channels / reduction.max(1);
        if reduced < 1 {
            return Err(Error::config(format!(
                "{name}: {channels} channels leave no query/key channels at reduction {reduction}"
            )));
        }
        let pw = ConvConfig::pointwise();
        Ok(Self {
            query: Conv2d::new(store, &format!("{name}.query"), channels, reduced, pw, rng)?,
            key: Conv2d::new(store, &format!("{name}.key"), channels, reduced, pw, rng)?,
            unary: Conv2d::new(store, &format!("{name}.unary"), channels, 1, pw, rng)?,
            value: Conv2d::new(store, &format!("{name}.value"), channels, channels, pw, rng)?,
            proj: Conv2d::new(store, &format!("{name}.proj"), channels, channels, pw, rng)?,
            channels,
            reduced,
            residual: true,
        })
    }

    pub fn maps<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<DnlMaps> {
        if g.shape(x)[1] != self.channels {
            return Err(Error::dim("dnl input channels", &g.shape(x), &[self.channels]));
        }
        Ok(DnlMaps {
            q: self.query.forward(g, x)?,
            k: self.key.forward(g, x)?,
            m: self.unary.forward(g, x)?,
            v: self.value.forward(g, x)?,
        })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let maps = self.maps(g, x)?;
        let y = attend(g, &maps)?;
        let y = self.proj.forward(g, y)?;
        if self.residual {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.query, &self.key, &self.unary, &self.value, &self.proj]
            .iter()
            .map(|c| c.param_count())
            .sum()
    }
}

fn flatten_positions<E: Element>(g: &mut Graph<E>, x: Var) -> Result<Var> {
    let [n, c, h, w] = g.shape(x);
    g.reshape(x, [n, 1, c, h * w])
}

/// Attention weights `[N, 1, HW, HW]`; row `i` holds `w(x_i, x_j)` over `j`.
/// Means are taken per batch item over all positions.
pub fn attention_weights<E: Element>(g: &mut Graph<E>, q: Var, k: Var, m: Var) -> Result<Var> {
    let pairwise = pairwise_softmax(g, q, k)?;
    let unary = unary_softmax(g, m)?;
    g.add(pairwise, unary)
}

/// `softmax_j((q_i - mu_q)^T (k_j - mu_k))`, shape `[N, 1, HW, HW]`.
pub fn pairwise_softmax<E: Element>(g: &mut Graph<E>, q: Var, k: Var) -> Result<Var> {
    let q = flatten_positions(g, q)?;
    let k = flatten_positions(g, k)?;
    let mu_q = g.mean_axis(q, 3)?;
    let mu_k = g.mean_axis(k, 3)?;
    let qc = g.sub(q, mu_q)?;
    let kc = g.sub(k, mu_k)?;
    let qt = g.transpose(qc)?;
    let logits = g.matmul(qt, kc)?;
    g.softmax(logits, 3)
}

/// `softmax_j(m_j)`, shape `[N, 1, 1, HW]`.
pub fn unary_softmax<E: Element>(g: &mut Graph<E>, m: Var) -> Result<Var> {
    let m = flatten_positions(g, m)?;
    g.softmax(m, 3)
}

/// `y_i = sum_j w(x_i, x_j) v_j`, returned as `[N, C, H, W]`.
pub fn attend<E: Element>(g: &mut Graph<E>, maps: &DnlMaps) -> Result<Var> {
    let shape = g.shape(maps.v);
    let w = attention_weights(g, maps.q, maps.k, maps.m)?;
    let v = flatten_positions(g, maps.v)?;
    let wt = g.transpose(w)?;
    let y = g.matmul(v, wt)?;
    g.reshape(y, shape)
}

/// expand 1x1 -> depthwise 3x3 -> ReLU -> reduce 1x1, with residual.
#[derive(Clone, Debug)]
pub struct FfnBlock {
    pub expand: Conv2d,
    pub depthwise: Conv2d,
    pub reduce: Conv2d,
    pub channels: usize,
    pub ratio: usize,
}

impl FfnBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::config(format!("{name}: expansion ratio must be positive")));
        }
        let hidden = channels * ratio;
        Ok(Self {
            expand: Conv2d::new(store, &format!("{name}.expand"), channels, hidden, ConvConfig::pointwise(), rng)?,
            depthwise: Conv2d::new(store, &format!("{name}.depthwise"), hidden, hidden, ConvConfig::depthwise3(hidden), rng)?,
            reduce: Conv2d::new(store, &format!("{name}.reduce"), hidden, channels, ConvConfig::pointwise(), rng)?,
            channels,
            ratio,
        })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, x)?;
        let h = self.depthwise.forward(g, h)?;
        let h = g.relu(h);
        let h = self.reduce.forward(g, h)?;
        g.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.depthwise.param_count() + self.reduce.param_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrmConfig {
    /// Query/key channels are `C / attn_reduction`.
    pub attn_reduction: usize,
    pub ffn_ratio: usize,
}

impl Default for FrmConfig {
    fn default() -> Self {
        Self {
            attn_reduction: 4,
            ffn_ratio: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrmHead {
    pub dnl: DnlBlock,
    pub ffn: FfnBlock,
    pub cut: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl FrmHead {
    /// `in_channels` is the concatenated width `C1 + C2 + C3 + C4`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: FrmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            dnl: DnlBlock::new(store, &format!("{name}.dnl"), in_channels, cfg.attn_reduction, rng)?,
            ffn: FfnBlock::new(store, &format!("{name}.ffn"), in_channels, cfg.ffn_ratio, rng)?,
            cut: Conv2d::new(store, &format!("{name}.cut"), in_channels, out_channels, ConvConfig::pointwise(), rng)?,
            in_channels,
            out_channels,
        })
    }

    /// Refines an already aggregated feature.
    pub fn refine<E: Element>(&self, g: &mut Graph<E>, fc: Var) -> Result<Var> {
        let x = self.dnl.forward(g, fc)?;
        let x = self.ffn.forward(g, x)?;
        self.cut.forward(g, x)
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &FeaturePyramid) -> Result<Var> {
        let chans: usize = p.channels(g).iter().sum();
        if chans != self.in_channels {
            return Err(Error::dim("frm pyramid channels", &p.channels(g), &[self.in_channels]));
        }
        let fc = aggregate_stages(g, p)?;
        self.refine(g, fc)
    }

    pub fn param_count(&self) -> usize {
        self.dnl.param_count() + self.ffn.param_count() + self.cut.param_count()
    }
}
