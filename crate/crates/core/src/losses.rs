//! Hybrid segmentation objective: per-pixel cross-entropy plus a supervised
//! pixel contrastive term on the embedding head, `total = ce + lambda * cl`.

use rand::seq::index::sample;
use rand::Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::{ContrastiveAnchor, Graph, Var};
use crate::kernels::resize_nearest;
use crate::tensor::{lit, Element, Tensor};

pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau: f64,
    pub ignore_index: u8,
    pub anchors_per_class: usize,
    pub max_positives: usize,
    pub max_negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 0.1,
            ignore_index: IGNORE_INDEX,
            anchors_per_class: 16,
            max_positives: 16,
            max_negatives: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.anchors_per_class < 2 || self.max_positives == 0 {
            return Err(Error::config("contrastive sampling needs anchors_per_class >= 2 and max_positives >= 1"));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set(&mut self.lambda, "lambda")?;
        kv.set(&mut self.tau, "tau")?;
        kv.set(&mut self.ignore_index, "ignore_index")?;
        kv.set(&mut self.anchors_per_class, "anchors_per_class")?;
        kv.set(&mut self.max_positives, "max_positives")?;
        kv.set(&mut self.max_negatives, "max_negatives")?;
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("lambda", self.lambda);
        kv.insert("tau", self.tau);
        kv.insert("ignore_index", self.ignore_index);
        kv.insert("anchors_per_class", self.anchors_per_class);
        kv.insert("max_positives", self.max_positives);
        kv.insert("max_negatives", self.max_negatives);
        kv
    }
}

/// A loss term; `empty` flags that nothing contributed and the value is 0.
#[derive(Clone, Copy, Debug)]
pub struct Term {
    pub value: Var,
    pub empty: bool,
}

/// Mean cross-entropy over non-ignored pixels of `[N, K, H, W]` logits.
pub fn cross_entropy<E: Element>(g: &mut Graph<E>, logits: Var, labels: &[u8], ignore: u8) -> Result<Term> {
    let (value, count) = g.cross_entropy(logits, labels, ignore)?;
    Ok(Term { value, empty: count == 0 })
}

/// Nearest-neighbour downsampling of `N` label planes.
pub fn downsample_labels(labels: &[u8], n: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    labels
        .chunks(h * w)
        .take(n)
        .flat_map(|plane| resize_nearest(plane, h, w, oh, ow))
        .collect()
}

/// Pixels chosen for the contrastive term and the anchors over them.
/// Anchor and set indices refer to rows of `pixels`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorSample {
    pub pixels: Vec<(usize, usize, usize)>,
    pub anchors: Vec<ContrastiveAnchor>,
}

/// Draws up to `anchors_per_class` pixels for every present class, then pairs
/// each with same-class positives and other-class negatives, both capped.
pub fn sample_anchors<R: Rng>(labels: &[u8], n: usize, h: usize, w: usize, cfg: &LossConfig, rng: &mut R) -> AnchorSample {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, &y) in labels.iter().enumerate().take(n * h * w) {
        if y != cfg.ignore_index {
            by_class[y as usize].push(i);
        }
    }
    let mut out = AnchorSample::default();
    let mut class_of = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let take = cfg.anchors_per_class.min(members.len());
        for k in sample(rng, members.len(), take).into_iter() {
            let flat = members[k];
            out.pixels.push((flat / (h * w), (flat / w) % h, flat % w));
            class_of.push(c);
        }
    }
    let rows = out.pixels.len();
    for a in 0..rows {
        let positives: Vec<usize> = (0..rows).filter(|&j| j != a && class_of[j] == class_of[a]).collect();
        if positives.is_empty() {
            continue;
        }
        let negatives: Vec<usize> = (0..rows).filter(|&j| class_of[j] != class_of[a]).collect();
        out.anchors.push(ContrastiveAnchor {
            anchor: a,
            positives: subsample(positives, cfg.max_positives, rng),
            negatives: subsample(negatives, cfg.max_negatives, rng),
        });
    }
    out
}

fn subsample<R: Rng>(items: Vec<usize>, cap: usize, rng: &mut R) -> Vec<usize> {
    if items.len() <= cap {
        return items;
    }
    let mut picked: Vec<usize> = sample(rng, items.len(), cap).into_iter().map(|k| items[k]).collect();
    picked.sort_unstable();
    picked
}

/// Contrastive term over L2-normalized embeddings at the label resolution of
/// `labels` (already downsampled to the embedding grid).
pub fn contrastive_from_sample<E: Element>(g: &mut Graph<E>, embeddings: Var, s: &AnchorSample, tau: f64) -> Result<Term> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    if s.anchors.is_empty() {
        let zero = g.constant(Tensor::scalar(E::zero()));
        return Ok(Term { value: zero, empty: true });
    }
    let z = g.l2_normalize_channels(embeddings);
    let a = g.gather_pixels(z, &s.pixels)?;
    let at = g.transpose(a)?;
    let sim = g.matmul(a, at)?;
    let sim = g.scale(sim, lit(1.0 / tau));
    let value = g.contrastive(sim, &s.anchors)?;
    Ok(Term { value, empty: false })
}

/// Samples anchors from full-resolution `labels` and evaluates the contrastive term.
pub fn contrastive_loss<E: Element, R: Rng>(
    g: &mut Graph<E>,
    embeddings: Var,
    labels: &[u8],
    label_hw: (usize, usize),
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(Term, usize)> {
    let [n, _, eh, ew] = g.shape(embeddings);
    let (h, w) = label_hw;
    if labels.len() != n * h * w {
        return Err(Error::dim("contrastive labels", &g.shape(embeddings), &[labels.len()]));
    }
    let small = downsample_labels(labels, n, h, w, eh, ew);
    let s = sample_anchors(&small, n, eh, ew, cfg, rng);
    let term = contrastive_from_sample(g, embeddings, &s, cfg.tau)?;
    Ok((term, s.anchors.len()))
}

#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub total: Var,
    pub ce: Term,
    pub cl: Term,
    pub anchors: usize,
}

impl LossReport {
    pub fn values<E: Element>(&self, g: &Graph<E>) -> (f64, f64, f64) {
        let v = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        (v(self.total), v(self.ce.value), v(self.cl.value))
    }
}

/// `ce + lambda * cl`, recorded in the graph. Without embeddings the
/// contrastive term is a constant zero.
pub fn hybrid_loss<E: Element, R: Rng>(
    g: &mut Graph<E>,
    logits: Var,
    embeddings: Option<Var>,
    labels: &[u8],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossReport> {
    cfg.validate()?;
    let [_, _, h, w] = g.shape(logits);
    let ce = cross_entropy(g, logits, labels, cfg.ignore_index)?;
    let (cl, anchors) = match embeddings {
        Some(e) => contrastive_loss(g, e, labels, (h, w), cfg, rng)?,
        None => {
            let zero = g.constant(Tensor::scalar(E::zero()));
            (Term { value: zero, empty: true }, 0)
        }
    };
    let weighted = g.scale(cl.value, lit(cfg.lambda));
    let total = g.add(ce.value, weighted)?;
    Ok(LossReport { total, ce, cl, anchors })
}
