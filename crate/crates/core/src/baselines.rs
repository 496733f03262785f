//! Pyramid-pooling context heads used as drop-in alternatives to the FRM.
//! Both consume the same concatenated multi-stage feature and emit the same
//! output width, so they can be swapped in the model and compared by cost.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, ConvConfig};
use crate::params::ParamStore;
use crate::tensor::Element;

/// What a PPM bin larger than the feature extent does.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinPolicy {
    Reject,
    /// Pool to `min(bin, extent)` per axis.
    Clamp,
}

#[derive(Clone, Debug)]
pub struct PpmHead {
    pub bins: Vec<usize>,
    pub branches: Vec<Conv2d>,
    pub fusion: Conv2d,
    pub in_channels: usize,
    pub branch_width: usize,
    pub out_channels: usize,
    pub bin_policy: BinPolicy,
}

impl PpmHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        branch_width: usize,
        out_channels: usize,
        bins: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if bins.is_empty() || bins.contains(&0) {
            return Err(Error::config(format!("{name}: bins must be non-empty and positive")));
        }
        let pw = ConvConfig::pointwise();
        let branches = bins
            .iter()
            .enumerate()
            .map(|(i, _)| Conv2d::new(store, &format!("{name}.branch{i}"), in_channels, branch_width, pw, rng))
            .collect::<Result<Vec<_>>>()?;
        let fused = in_channels + bins.len() * branch_width;
        Ok(Self {
            bins: bins.to_vec(),
            branches,
            fusion: Conv2d::new(store, &format!("{name}.fusion"), fused, out_channels, pw, rng)?,
            in_channels,
            branch_width,
            out_channels,
            bin_policy: BinPolicy::Reject,
        })
    }

    /// Pooled extent used for `bin` on an `h x w` input.
    pub fn bin_extent(&self, bin: usize, h: usize, w: usize) -> Result<(usize, usize)> {
        match self.bin_policy {
            BinPolicy::Clamp => Ok((bin.min(h), bin.min(w))),
            BinPolicy::Reject if bin > h || bin > w => Err(Error::contract(format!(
                "pyramid bin {bin} exceeds input extent {h}x{w}"
            ))),
            BinPolicy::Reject => Ok((bin, bin)),
        }
    }

    /// Branch `idx`: pool, 1x1 conv, ReLU, upsample back to the input extent.
    pub fn branch_output<E: Element>(&self, g: &mut Graph<E>, x: Var, idx: usize) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        let (bh, bw) = self.bin_extent(self.bins[idx], h, w)?;
        let pooled = g.adaptive_avg_pool(x, bh, bw)?;
        let y = self.branches[idx].forward(g, pooled)?;
        let y = g.relu(y);
        g.upsample_bilinear(y, h, w)
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        if g.shape(x)[1] != self.in_channels {
            return Err(Error::dim("ppm input channels", &g.shape(x), &[self.in_channels]));
        }
        let mut parts = vec![x];
        for idx in 0..self.bins.len() {
            parts.push(self.branch_output(g, x, idx)?);
        }
        let cat = g.concat_channels(&parts)?;
        self.fusion.forward(g, cat)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(|b| b.param_count()).sum::<usize>() + self.fusion.param_count()
    }
}

/// One pooled DAPPM branch; `stride == None` is global pooling.
#[derive(Clone, Debug)]
pub struct DappmBranch {
    pub stride: Option<usize>,
    pub conv: Conv2d,
    pub process: Conv2d,
}

impl DappmBranch {
    pub fn pooled_extent(&self, h: usize, w: usize) -> (usize, usize) {
        match self.stride {
            Some(s) => (h.div_ceil(s), w.div_ceil(s)),
            None => (1, 1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DappmHead {
    pub scale0: Conv2d,
    pub branches: Vec<DappmBranch>,
    pub compression: Conv2d,
    pub shortcut: Conv2d,
    pub in_channels: usize,
    pub branch_width: usize,
    pub out_channels: usize,
}

impl DappmHead {
    /// `strides` lists the pooled branches; `global` appends a global-pooling branch.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        branch_width: usize,
        out_channels: usize,
        strides: &[usize],
        global: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if strides.contains(&0) {
            return Err(Error::config(format!("{name}: pooling strides must be positive")));
        }
        let pw = ConvConfig::pointwise();
        let mut kinds: Vec<Option<usize>> = strides.iter().copied().map(Some).collect();
        if global {
            kinds.push(None);
        }
        let branches = kinds
            .into_iter()
            .enumerate()
            .map(|(i, stride)| {
                Ok(DappmBranch {
                    stride,
                    conv: Conv2d::new(store, &format!("{name}.scale{}", i + 1), in_channels, branch_width, pw, rng)?,
                    process: Conv2d::new(
                        store,
                        &format!("{name}.process{}", i + 1),
                        branch_width,
                        branch_width,
                        ConvConfig::k3(1).bias(true),
                        rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = branch_width * (branches.len() + 1);
        Ok(Self {
            scale0: Conv2d::new(store, &format!("{name}.scale0"), in_channels, branch_width, pw, rng)?,
            compression: Conv2d::new(store, &format!("{name}.compression"), fused, out_channels, pw, rng)?,
            shortcut: Conv2d::new(store, &format!("{name}.shortcut"), in_channels, out_channels, pw, rng)?,
            branches,
            in_channels,
            branch_width,
            out_channels,
        })
    }

    /// Branch k processes `up(scale_k(pool_k(x))) + out_{k-1}`; outputs of all
    /// levels are concatenated, compressed, and added to a 1x1 shortcut.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(x);
        if c != self.in_channels {
            return Err(Error::dim("dappm input channels", &g.shape(x), &[self.in_channels]));
        }
        let s0 = self.scale0.forward(g, x)?;
        let mut outs = vec![s0];
        let mut prev = s0;
        for b in &self.branches {
            let (ph, pw) = b.pooled_extent(h, w);
            let pooled = g.adaptive_avg_pool(x, ph, pw)?;
            let y = b.conv.forward(g, pooled)?;
            let y = g.relu(y);
            let y = g.upsample_bilinear(y, h, w)?;
            let z = g.add(y, prev)?;
            let z = b.process.forward(g, z)?;
            let z = g.relu(z);
            outs.push(z);
            prev = z;
        }
        let cat = g.concat_channels(&outs)?;
        let comp = self.compression.forward(g, cat)?;
        let short = self.shortcut.forward(g, x)?;
        g.add(comp, short)
    }

    pub fn param_count(&self) -> usize {
        self.scale0.param_count()
            + self.compression.param_count()
            + self.shortcut.param_count()
            + self
                .branches
                .iter()
                .map(|b| b.conv.param_count() + b.process.param_count())
                .sum::<usize>()
    }
}
