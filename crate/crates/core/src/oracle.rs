//! Literal, loop-by-loop evaluation of the disentangled non-local block, used
//! as an independent reference for the vectorized graph implementation.
//!
//! Nothing here touches the graph: every 1x1 transform, mean, softmax and
//! weighted sum is a plain `f64` loop over pixels and channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::frm::DnlBlock;
use crate::graph::Graph;
use crate::layers::Conv2d;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `out[o] = b[o] + sum_c W[o, c] * x[c]` at one pixel.
fn pointwise(store: &ParamStore, conv: &Conv2d, x: &[f64]) -> Vec<f64> {
    let w = store.value(conv.weight).data();
    let cin = conv.in_channels;
    (0..conv.out_channels)
        .map(|o| {
            let mut acc = conv.bias.map_or(0.0, |b| store.value(b).data()[o] as f64);
            for (c, xc) in x.iter().enumerate() {
                acc += w[o * cin + c] as f64 * xc;
            }
            acc
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pixels(x: &Tensor<f64>, n: usize) -> Vec<Vec<f64>> {
    let [_, c, h, w] = x.shape();
    (0..h * w).map(|p| (0..c).map(|ch| x.at(n, ch, p / w, p % w)).collect()).collect()
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut mu = vec![0.0; rows[0].len()];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu.iter().map(|m| m / rows.len() as f64).collect()
}

/// `w[n][i][j]` for every batch item, from per-pixel `q`, `k` and scalar `m`.
pub fn weights_from_maps(q: &[Vec<f64>], k: &[Vec<f64>], m: &[f64]) -> Vec<Vec<f64>> {
    let mu_q = mean_vector(q);
    let mu_k = mean_vector(k);
    let unary = softmax(m);
    q.iter()
        .map(|qi| {
            let qc: Vec<f64> = qi.iter().zip(&mu_q).map(|(a, b)| a - b).collect();
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| {
                    let kc: Vec<f64> = kj.iter().zip(&mu_k).map(|(a, b)| a - b).collect();
                    dot(&qc, &kc)
                })
                .collect();
            softmax(&logits).iter().zip(&unary).map(|(p, u)| p + u).collect()
        })
        .collect()
}

/// Attention weights of `block` for every batch item of `x`.
pub fn attention_weights(store: &ParamStore, block: &DnlBlock, x: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    (0..x.shape()[0])
        .map(|n| {
            let px = pixels(x, n);
            let q: Vec<Vec<f64>> = px.iter().map(|p| pointwise(store, &block.query, p)).collect();
            let k: Vec<Vec<f64>> = px.iter().map(|p| pointwise(store, &block.key, p)).collect();
            let m: Vec<f64> = px.iter().map(|p| pointwise(store, &block.unary, p)[0]).collect();
            weights_from_maps(&q, &k, &m)
        })
        .collect()
}

/// Full block output: `x + proj(sum_j w_ij g(x_j))` (or without the residual).
pub fn dnl_forward(store: &ParamStore, block: &DnlBlock, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let weights = attention_weights(store, block, x);
    let mut out = Tensor::zeros([n, c, h, w]);
    for (b, wb) in weights.iter().enumerate() {
        let px = pixels(x, b);
        let g: Vec<Vec<f64>> = px.iter().map(|p| pointwise(store, &block.value, p)).collect();
        for i in 0..h * w {
            let mut y = vec![0.0; c];
            for j in 0..h * w {
                for ch in 0..c {
                    y[ch] += wb[i][j] * g[j][ch];
                }
            }
            let z = pointwise(store, &block.proj, &y);
            for ch in 0..c {
                let idx = out.index(b, ch, i / w, i % w);
                out.data_mut()[idx] = z[ch] + if block.residual { px[i][ch] } else { 0.0 };
            }
        }
    }
    out
}

/// A DNL block with every weight and bias drawn uniformly from `[-1, 1)`.
pub fn random_block(channels: usize, reduction: usize, seed: u64) -> Result<(ParamStore, DnlBlock)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = DnlBlock::new(&mut store, "dnl", channels, reduction, &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    Ok((store, block))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCase {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub max_abs_dev: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub cases: Vec<OracleCase>,
}

impl OracleReport {
    pub fn max_abs_dev(&self) -> f64 {
        self.cases.iter().map(|c| c.max_abs_dev).fold(0.0, f64::max)
    }
}

/// Compares the `f32` graph implementation with the literal evaluation for
/// every spatial size up to `max_extent x max_extent` and each channel count.
pub fn sweep(seed: u64, max_extent: usize, channels: &[usize], batch: usize) -> Result<OracleReport> {
    let mut cases = Vec::new();
    let mut case_seed = seed;
    for &c in channels {
        for h in 1..=max_extent {
            for w in 1..=max_extent {
                case_seed = case_seed.wrapping_add(1);
                let (store, block) = random_block(c, 4, case_seed)?;
                let x = crate::gradcheck::random_tensor([batch, c, h, w], case_seed ^ 0x5eed);
                let reference = dnl_forward(&store, &block, &x);
                let mut g = Graph::<f32>::from_store(&store, false);
                let xv = g.constant(x.cast());
                let y = block.forward(&mut g, xv)?;
                let got: Tensor<f64> = g.value(y).cast();
                cases.push(OracleCase {
                    channels: c,
                    height: h,
                    width: w,
                    max_abs_dev: got.max_abs_diff(&reference),
                });
            }
        }
    }
    Ok(OracleReport { cases })
}
