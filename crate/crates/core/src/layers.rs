//! Convolutional building blocks. Layers own `ParamId`s into a shared
//! [`ParamStore`] and record their forward pass on a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Kaiming fan-in normal: `N(0, 2 / fan_in)`.
pub fn init_kaiming<R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_, _, _, _| normal.sample(rng) as f32)
}

pub fn init_zeros(shape: Shape) -> Tensor<f32> {
    Tensor::zeros(shape)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

/// Construction parameters for [`Conv2d`].
#[derive(Clone, Copy, Debug)]
pub struct ConvConfig {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvConfig {
    pub fn pointwise() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            pad: 0,
            groups: 1,
            bias: true,
        }
    }

    pub fn k3(stride: usize) -> Self {
        Self {
            kernel: 3,
            stride,
            pad: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn depthwise3(channels: usize) -> Self {
        Self {
            kernel: 3,
            stride: 1,
            pad: 1,
            groups: channels,
            bias: true,
        }
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: ConvConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let g = cfg.groups;
        if g == 0 || in_channels % g != 0 || out_channels % g != 0 {
            return Err(Error::config(format!(
                "{name}: groups {g} must divide in {in_channels} and out {out_channels}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config(format!("{name}: zero channels")));
        }
        let cin_g = in_channels / g;
        let wshape = [out_channels, cin_g, cfg.kernel, cfg.kernel];
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            init_kaiming(wshape, cin_g * cfg.kernel * cfg.kernel, rng),
        );
        let bias = cfg
            .bias
            .then(|| store.add(format!("{name}.bias"), ParamKind::NoDecay, init_zeros([1, out_channels, 1, 1])));
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
            kernel: cfg.kernel,
            spec: ConvSpec {
                stride: cfg.stride,
                pad: cfg.pad,
                groups: g,
            },
        })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != self.in_channels {
            return Err(Error::dim("conv input channels", &g.shape(x), &[self.in_channels]));
        }
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn out_extent(&self, input: usize) -> usize {
        self.spec.out_extent(input, self.kernel).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        let w = self.out_channels * (self.in_channels / self.spec.groups) * self.kernel * self.kernel;
        w + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    /// `2 * outH * outW * outC * (inC/groups) * k * k`, plus one add per output for the bias.
    pub fn flops(&self, oh: usize, ow: usize) -> u64 {
        let (oh, ow) = (oh as u64, ow as u64);
        let per_out = (self.in_channels / self.spec.groups * self.kernel * self.kernel) as u64;
        let mut f = 2 * oh * ow * self.out_channels as u64 * per_out;
        if self.bias.is_some() {
            f += oh * ow * self.out_channels as u64;
        }
        f
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let s = [1, channels, 1, 1];
        Self {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), ParamKind::NoDecay, Tensor::full(s, 1.0)),
            beta: store.add(format!("{name}.beta"), ParamKind::NoDecay, init_zeros(s)),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, init_zeros(s)),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(s, 1.0)),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(x, gamma, beta, self.running_mean, self.running_var, self.eps, self.momentum)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// conv3x3 (no bias) -> batch norm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, ConvConfig::k3(stride), rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.relu(y))
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    /// Conv FLOPs plus 2 per element for normalization and 1 for the ReLU.
    pub fn flops(&self, oh: usize, ow: usize) -> u64 {
        self.conv.flops(oh, ow) + 3 * (oh * ow * self.conv.out_channels) as u64
    }
}

pub fn relu_layer<E: Element>(g: &mut Graph<E>, x: Var) -> Var {
    g.relu(x)
}

/// Folds recorded batch statistics into the running buffers.
pub fn apply_bn_updates<E: Element>(store: &mut ParamStore, g: &mut Graph<E>) {
    for u in g.take_bn_updates() {
        let m = u.momentum as f32;
        for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
            let run = store.value_mut(id).data_mut();
            for (r, b) in run.iter_mut().zip(batch) {
                *r = (1.0 - m) * *r + m * b.to_f32().unwrap();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, id: ParamId, data: Vec<f32>) {
        let s = store.value(id).shape();
        *store.value_mut(id) = Tensor::new(s, data).unwrap();
    }

    #[test]
    fn pointwise_identity_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 2, ConvConfig::pointwise().bias(false), &mut rng).unwrap();
        set(&mut store, conv.weight, vec![1.0, 1.0, 1.0, -1.0]);
        let mut g = Graph::<f32>::from_store(&store, false);
        let x = g.input(Tensor::new([1, 2, 1, 1], vec![3.0, 4.0]).unwrap());
        let y = conv.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, -1.0]);

        set(&mut store, conv.weight, vec![1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::<f32>::from_store(&store, false);
        let t = Tensor::from_fn([2, 2, 3, 3], |n, c, h, w| (n + 2 * c + 3 * h) as f32 - w as f32 * 0.5);
        let x = g.input(t.clone());
        let y = conv.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), t.data());
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 3, 4, ConvConfig::k3(1), &mut rng).unwrap();
        let mut g = Graph::<f32>::from_store(&store, false);
        let x = g.input(Tensor::zeros([1, 2, 4, 4]));
        assert!(matches!(conv.forward(&mut g, x), Err(Error::Dimension { .. })));
        assert!(Conv2d::new(&mut store, "bad", 3, 4, ConvConfig::depthwise3(2), &mut rng).is_err());
    }

    #[test]
    fn output_extent_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, ConvConfig::k3(2), &mut rng).unwrap();
        for input in [1usize, 2, 7, 32, 33, 96] {
            let mut g = Graph::<f32>::from_store(&store, false);
            let x = g.input(Tensor::zeros([1, 1, input, input + 1]));
            let y = conv.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y)[2], (input + 2 - 3) / 2 + 1);
            assert_eq!(g.shape(y)[3], (input + 1 + 2 - 3) / 2 + 1);
        }
    }

    #[test]
    fn batch_norm_training_statistics() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        let mut g = Graph::<f32>::from_store(&store, true);
        let t = Tensor::from_fn([2, 3, 4, 4], |n, c, h, w| {
            ((n * 31 + c * 17 + h * 7 + w * 3) % 11) as f32 * (c as f32 + 1.0) + 5.0
        });
        let x = g.input(t);
        let y = bn.forward(&mut g, x).unwrap();
        let v = g.value(y);
        for c in 0..3 {
            let vals: Vec<f32> = (0..2)
                .flat_map(|n| (0..16).map(move |p| (n, p)))
                .map(|(n, p)| v.at(n, c, p / 4, p % 4))
                .collect();
            let mean = vals.iter().sum::<f32>() / 32.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / 32.0;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
        apply_bn_updates(&mut store, &mut g);
        assert!(store.value(bn.running_mean).data().iter().all(|&m| m > 0.5));
    }

    #[test]
    fn kaiming_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = init_kaiming([64, 32, 3, 3], 288, &mut rng);
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((var - 2.0 / 288.0).abs() < 0.1 * 2.0 / 288.0);
    }
}
