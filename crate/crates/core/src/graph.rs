//! Reverse-mode automatic differentiation over a recorded operation graph.
//!
//! Nodes live in an arena in creation order, which is a topological order, so
//! the backward sweep is a single reverse pass that visits each node once.
//! A graph is generic over its element type: training records it in `f32`,
//! gradient checks replay the identical recording in `f64`.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ConvSpec};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{lit, numel, Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation identifier, used for reporting and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    Reshape,
    Permute,
    Concat,
    Softmax,
    Matmul,
    Conv2d,
    BatchNorm,
    AvgPool,
    Upsample,
    CrossEntropy,
    L2Normalize,
    Gather,
    Contrastive,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Softmax,
        OpKind::Matmul,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::AvgPool,
        OpKind::Upsample,
        OpKind::CrossEntropy,
        OpKind::L2Normalize,
        OpKind::Gather,
        OpKind::Contrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Softmax => "softmax",
            OpKind::Matmul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::AvgPool => "avg_pool",
            OpKind::Upsample => "upsample",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Gather => "gather",
            OpKind::Contrastive => "contrastive",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One anchor of the pixel contrastive objective, as row indices into a
/// similarity matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveAnchor {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Reshape(Var),
    Permute(Var, [usize; 4]),
    Concat(Vec<Var>),
    Softmax(Var, usize),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
        batch_stats: bool,
    },
    AvgPool(Var),
    Upsample(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        ignore: u8,
        count: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<E>,
    },
    Gather {
        x: Var,
        pixels: Vec<(usize, usize, usize)>,
    },
    Contrastive {
        sim: Var,
        anchors: Vec<ContrastiveAnchor>,
    },
}

impl<E> Op<E> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Concat(..) => OpKind::Concat,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::AvgPool(..) => OpKind::AvgPool,
            Op::Upsample(..) => OpKind::Upsample,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Gather { .. } => OpKind::Gather,
            Op::Contrastive { .. } => OpKind::Contrastive,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Batch statistics observed by a training-mode batch norm, to be folded into
/// the running buffers once the step completes.
#[derive(Clone, Debug)]
pub struct BnUpdate<E> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub batch_mean: Vec<E>,
    /// Unbiased estimate.
    pub batch_var: Vec<E>,
}

pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    params: Vec<Tensor<E>>,
    kinds: Vec<ParamKind>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    bn_updates: Vec<BnUpdate<E>>,
    fault: Option<OpKind>,
}

fn strides(shape: &Shape) -> [usize; 4] {
    [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1]
}

/// `(outer, len, inner)` decomposition around `axis`.
fn axis_split(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Visits `(index_in_a, index_in_b)` for `b` broadcast against `a`.
fn for_each_bcast(a: &Shape, b: &Shape, mut f: impl FnMut(usize, usize)) {
    let full = strides(b);
    let sb: [usize; 4] = std::array::from_fn(|i| if b[i] == 1 { 0 } else { full[i] });
    let mut ia = 0;
    for n in 0..a[0] {
        for c in 0..a[1] {
            for h in 0..a[2] {
                let base = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..a[3] {
                    f(ia, base + w * sb[3]);
                    ia += 1;
                }
            }
        }
    }
}

fn add_into<E: Element>(acc: &mut [E], g: &[E]) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    /// A graph without registered parameters, in training mode.
    pub fn new() -> Self {
        Self::with_values(Vec::new(), Vec::new(), true)
    }

    pub fn from_store(store: &ParamStore, training: bool) -> Self {
        let kinds = store.entries().iter().map(|e| e.kind).collect();
        Self::with_values(store.values(), kinds, training)
    }

    /// Graph over explicit parameter values (indexed by `ParamId`), e.g. a
    /// perturbed `f64` copy during finite-difference checks.
    pub fn with_values(params: Vec<Tensor<E>>, kinds: Vec<ParamKind>, training: bool) -> Self {
        let n = params.len();
        assert_eq!(kinds.len(), n);
        Self {
            nodes: Vec::new(),
            params,
            kinds,
            param_vars: vec![None; n],
            training,
            bn_updates: Vec::new(),
            fault: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Test hook: corrupts the backward rule of `kind` by a factor of 1.01.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        debug_assert!(value.all_finite() || !inputs.iter().all(|v| self.nodes[v.0].value.all_finite()));
        self.nodes.push(Node {
            value: value.with_requires_grad(requires),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor<E>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.input(t.with_requires_grad(false))
    }

    /// Leaf for a stored parameter; created on first use and reused after.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params[id.0].clone().with_requires_grad(self.kinds[id.0].trainable());
        let v = self.input(t);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Whether the forward pass touched parameter `id`.
    pub fn param_recorded(&self, id: ParamId) -> bool {
        self.param_vars[id.0].is_some()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[E]> {
        self.param_vars[id.0].and_then(|v| self.grad(v))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<E>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Which side of zero every ReLU input lies on, in recording order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                bits.extend(self.data(a).iter().map(|&v| v > E::zero()));
            }
        }
        bits
    }

    // ---- elementwise ----------------------------------------------------

    fn check_bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Shape, Shape)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (0..4).any(|i| sb[i] != sa[i] && sb[i] != 1) {
            return Err(Error::dim(op, &sa, &sb));
        }
        Ok((sa, sb))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        let (sa, sb) = self.check_bcast(op, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len());
        if sa == sb {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else {
            for_each_bcast(&sa, &sb, |ia, ib| out.push(f(da[ia], db[ib])));
        }
        Tensor::new(sa, out)
    }

    /// `a + b`, with `b` broadcast over its unit extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: E) -> Var {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let t = Tensor::new(self.shape(a), data).unwrap();
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: E) -> Var {
        let data = self.data(a).iter().map(|&x| x + s).collect();
        let t = Tensor::new(self.shape(a), data).unwrap();
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(E::zero())).collect();
        let t = Tensor::new(self.shape(a), data).unwrap();
        self.push(t, Op::Relu(a), &[a])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().fold(E::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().fold(E::zero(), |acc, &x| acc + x) / lit(d.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> Result<(Shape, Vec<E>)> {
        if axis > 3 {
            return Err(Error::contract(format!("axis {axis} out of range")));
        }
        let shape = self.shape(a);
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.data(a);
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let mut os = shape;
        os[axis] = 1;
        Ok((os, out))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (s, d) = self.reduce_axis(a, axis)?;
        Ok(self.push(Tensor::new(s, d)?, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (s, mut d) = self.reduce_axis(a, axis)?;
        let len: E = lit(self.shape(a)[axis] as f64);
        d.iter_mut().for_each(|v| *v /= len);
        Ok(self.push(Tensor::new(s, d)?, Op::MeanAxis(a, axis), &[a]))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let t = Tensor::new(self.shape(a), self.data(a).to_vec())?.reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: [usize; 4]) -> Result<Var> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p > 3 || seen[p] {
                return Err(Error::contract(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let s = self.shape(a);
        let os: Shape = std::array::from_fn(|i| s[perm[i]]);
        let mut out = vec![E::zero(); numel(&s)];
        let d = self.data(a);
        permute_walk(&s, perm, |io, ii| out[io] = d[ii]);
        Ok(self.push(Tensor::new(os, out)?, Op::Permute(a, perm), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, [0, 1, 3, 2])
    }

    /// Concatenates along channels, copying.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::dim("concat", &s0, &s));
            }
            channels += s[1];
        }
        let plane = s0[2] * s0[3];
        let os = [s0[0], channels, s0[2], s0[3]];
        let mut out = Vec::with_capacity(numel(&os));
        for n in 0..s0[0] {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[n * c * plane..(n + 1) * c * plane]);
            }
        }
        Ok(self.push(Tensor::new(os, out)?, Op::Concat(parts.to_vec()), parts))
    }

    // ---- softmax / matmul ------------------------------------------------

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis > 3 {
            return Err(Error::contract(format!("axis {axis} out of range")));
        }
        let s = self.shape(a);
        let (outer, len, inner) = axis_split(&s, axis);
        let d = self.data(a);
        let mut out = vec![E::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = E::neg_infinity();
                for l in 0..len {
                    m = m.max(d[at(l)]);
                }
                let mut z = E::zero();
                for l in 0..len {
                    let e = (d[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::new(s, out)?, Op::Softmax(a, axis), &[a]))
    }

    /// Batched matrix product over the last two axes: `[B0,B1,M,K] x [B0,B1,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] || sa[1] != sb[1] || sa[3] != sb[2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[2], sa[3], sb[3]);
        let batches = sa[0] * sa[1];
        let mut out = vec![E::zero(); batches * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for bt in 0..batches {
            kernels::matmul_acc(
                &da[bt * m * k..(bt + 1) * m * k],
                &db[bt * k * n..(bt + 1) * k * n],
                &mut out[bt * m * n..(bt + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new([sa[0], sa[1], m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b), &[a, b]))
    }

    // ---- convolution / normalization / resampling -----------------------

    /// Cross-correlation. `w` is `[Cout, Cin/groups, kH, kW]`, `b` is `[1, Cout, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let g = spec.groups;
        if g == 0 || sx[1] % g != 0 || sw[0] % g != 0 || sw[1] * g != sx[1] {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, sw[0], 1, 1] {
                return Err(Error::dim("conv2d bias", &sw, &self.shape(b)));
            }
        }
        let (oh, ow) = match (spec.out_extent(sx[2], sw[2]), spec.out_extent(sx[3], sw[3])) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::dim("conv2d extent", &sx, &sw)),
        };
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh,
            ow,
            spec,
        };
        let out = kernels::conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        let t = Tensor::new([sx[0], sw[0], oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Batch normalization over (N, H, W) per channel. Training graphs use batch
    /// statistics and record a running-statistics update; inference graphs read
    /// the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        let c = s[1];
        for p in [gamma, beta] {
            if self.shape(p) != [1, c, 1, 1] {
                return Err(Error::dim("batch_norm", &s, &self.shape(p)));
            }
        }
        let plane = s[2] * s[3];
        let m = s[0] * plane;
        let d = self.data(x);
        let (mean, var, batch_stats) = if self.training {
            if m < 2 {
                return Err(Error::contract("batch_norm in training mode needs more than one value per channel"));
            }
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for ch in 0..c {
                let mut acc = E::zero();
                for n in 0..s[0] {
                    for &v in &d[(n * c + ch) * plane..(n * c + ch + 1) * plane] {
                        acc += v;
                    }
                }
                mean[ch] = acc / lit(m as f64);
                let mut sq = E::zero();
                for n in 0..s[0] {
                    for &v in &d[(n * c + ch) * plane..(n * c + ch + 1) * plane] {
                        let dv = v - mean[ch];
                        sq += dv * dv;
                    }
                }
                var[ch] = sq / lit(m as f64);
            }
            (mean, var, true)
        } else {
            (
                self.params[running_mean.0].data().to_vec(),
                self.params[running_var.0].data().to_vec(),
                false,
            )
        };
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + lit(eps)).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![E::zero(); d.len()];
        let mut out = vec![E::zero(); d.len()];
        for n in 0..s[0] {
            for ch in 0..c {
                let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                for i in r {
                    let xh = (d[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        if batch_stats {
            let unbias: E = lit(m as f64 / (m - 1) as f64);
            self.bn_updates.push(BnUpdate {
                running_mean,
                running_var,
                momentum,
                batch_mean: mean,
                batch_var: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        let t = Tensor::new(s, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        Ok(self.push(t, op, &[x, gamma, beta]))
    }

    /// Adaptive average pooling to `oh x ow`; requires `oh <= H`, `ow <= W`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x);
        if oh == 0 || ow == 0 {
            return Err(Error::contract("adaptive_avg_pool to a zero extent"));
        }
        if oh > s[2] || ow > s[3] {
            return Err(Error::contract(format!(
                "adaptive_avg_pool output {oh}x{ow} exceeds input {}x{}",
                s[2], s[3]
            )));
        }
        let out = kernels::adaptive_avg_pool(self.data(x), s[0] * s[1], s[2], s[3], oh, ow);
        let t = Tensor::new([s[0], s[1], oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool(x), &[x]))
    }

    /// Bilinear resize with half-pixel centres (align-corners false).
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x);
        if oh == 0 || ow == 0 {
            return Err(Error::contract("upsample to a zero extent"));
        }
        let out = kernels::bilinear(self.data(x), s[0] * s[1], s[2], s[3], oh, ow);
        let t = Tensor::new([s[0], s[1], oh, ow], out)?;
        Ok(self.push(t, Op::Upsample(x), &[x]))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
    /// Returns the scalar and the number of contributing pixels; with zero
    /// pixels the value is 0 and no gradient flows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<(Var, usize)> {
        let s = self.shape(logits);
        let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
        if labels.len() != n * plane {
            return Err(Error::dim("cross_entropy labels", &s, &[labels.len()]));
        }
        let d = self.data(logits);
        let mut total = E::zero();
        let mut count = 0usize;
        for b in 0..n {
            for p in 0..plane {
                let y = labels[b * plane + p];
                if y == ignore {
                    continue;
                }
                if y as usize >= k {
                    return Err(Error::contract(format!("label {y} outside [0, {k})")));
                }
                let at = |c: usize| d[(b * k + c) * plane + p];
                let m = (0..k).fold(E::neg_infinity(), |m, c| m.max(at(c)));
                let z = (0..k).fold(E::zero(), |z, c| z + (at(c) - m).exp());
                total += z.ln() + m - at(y as usize);
                count += 1;
            }
        }
        let value = if count == 0 { E::zero() } else { total / lit(count as f64) };
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            ignore,
            count,
        };
        Ok((self.push(Tensor::scalar(value), op, &[logits]), count))
    }

    /// Scales each pixel's channel vector to unit L2 norm.
    pub fn l2_normalize_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (c, plane) = (s[1], s[2] * s[3]);
        let d = self.data(x);
        let floor: E = lit(1e-12);
        let mut norms = vec![E::zero(); s[0] * plane];
        let mut out = vec![E::zero(); d.len()];
        for n in 0..s[0] {
            for p in 0..plane {
                let mut sq = E::zero();
                for ch in 0..c {
                    let v = d[(n * c + ch) * plane + p];
                    sq += v * v;
                }
                let norm = sq.sqrt().max(floor);
                norms[n * plane + p] = norm;
                for ch in 0..c {
                    let i = (n * c + ch) * plane + p;
                    out[i] = d[i] / norm;
                }
            }
        }
        let t = Tensor::new(s, out).unwrap();
        self.push(t, Op::L2Normalize { x, norms }, &[x])
    }

    /// Gathers channel vectors at `(n, h, w)` into an `[1, 1, S, C]` matrix.
    pub fn gather_pixels(&mut self, x: Var, pixels: &[(usize, usize, usize)]) -> Result<Var> {
        let s = self.shape(x);
        let mut out = Vec::with_capacity(pixels.len() * s[1]);
        for &(n, h, w) in pixels {
            if n >= s[0] || h >= s[2] || w >= s[3] {
                return Err(Error::contract(format!("pixel {:?} outside {s:?}", (n, h, w))));
            }
            for ch in 0..s[1] {
                out.push(self.nodes[x.0].value.at(n, ch, h, w));
            }
        }
        let t = Tensor::new([1, 1, pixels.len(), s[1]], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                x,
                pixels: pixels.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean over anchors of the positive-averaged InfoNCE terms, reading logits
    /// from the square similarity matrix `sim` (already temperature-scaled).
    pub fn contrastive(&mut self, sim: Var, anchors: &[ContrastiveAnchor]) -> Result<Var> {
        let s = self.shape(sim);
        if s[0] != 1 || s[1] != 1 || s[2] != s[3] {
            return Err(Error::dim("contrastive", &s, &[s[2], s[2]]));
        }
        let size = s[2];
        let d = self.data(sim);
        let mut total = E::zero();
        for a in anchors {
            let ok = a.anchor < size && a.positives.iter().chain(&a.negatives).all(|&j| j < size);
            if !ok || a.positives.is_empty() {
                return Err(Error::contract("contrastive anchor indices invalid or without positives"));
            }
            let row = &d[a.anchor * size..(a.anchor + 1) * size];
            let mut term = E::zero();
            for &p in &a.positives {
                term += anchor_term(row, p, &a.negatives);
            }
            total += term / lit(a.positives.len() as f64);
        }
        let value = if anchors.is_empty() {
            E::zero()
        } else {
            total / lit(anchors.len() as f64)
        };
        let op = Op::Contrastive {
            sim,
            anchors: anchors.to_vec(),
        };
        Ok(self.push(Tensor::scalar(value), op, &[sim]))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&gy);
                continue;
            }
            let corrupt = self.fault == Some(self.nodes[i].op.kind());
            for (v, mut g) in self.op_backward(i, &gy) {
                if !self.req(v) {
                    continue;
                }
                if corrupt {
                    g.iter_mut().for_each(|x| *x *= lit(1.01));
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn op_backward(&self, i: usize, gy: &[E]) -> Vec<(Var, Vec<E>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                vec![(*a, gy.to_vec()), (*b, self.reduce_to(gy, &out_shape, *b))]
            }
            Op::Sub(a, b) => {
                let mut gb = self.reduce_to(gy, &out_shape, *b);
                gb.iter_mut().for_each(|v| *v = -*v);
                vec![(*a, gy.to_vec()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![E::zero(); da.len()];
                let mut gb = vec![E::zero(); db.len()];
                for_each_bcast(&sa, &sb, |ia, ib| {
                    ga[ia] = gy[ia] * db[ib];
                    gb[ib] += gy[ia] * da[ia];
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, gy.iter().map(|&g| g * *s).collect())],
            Op::AddScalar(a) => vec![(*a, gy.to_vec())],
            Op::Relu(a) => {
                let g = self
                    .data(*a)
                    .iter()
                    .zip(gy)
                    .map(|(&x, &g)| if x > E::zero() { g } else { E::zero() })
                    .collect();
                vec![(*a, g)]
            }
            Op::Sum(a) => vec![(*a, vec![gy[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![gy[0] / lit(n as f64); n])]
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let s = self.shape(*a);
                let (outer, len, inner) = axis_split(&s, *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    E::one() / lit(len as f64)
                } else {
                    E::one()
                };
                let mut g = vec![E::zero(); numel(&s)];
                for o in 0..outer {
                    for l in 0..len {
                        for j in 0..inner {
                            g[(o * len + l) * inner + j] = gy[o * inner + j] * scale;
                        }
                    }
                }
                vec![(*a, g)]
            }
            Op::Reshape(a) => vec![(*a, gy.to_vec())],
            Op::Permute(a, perm) => {
                let s = self.shape(*a);
                let mut g = vec![E::zero(); numel(&s)];
                permute_walk(&s, *perm, |io, ii| g[ii] = gy[io]);
                vec![(*a, g)]
            }
            Op::Concat(parts) => {
                let plane = out_shape[2] * out_shape[3];
                let total = out_shape[1];
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut g = Vec::with_capacity(out_shape[0] * c * plane);
                    for n in 0..out_shape[0] {
                        let start = (n * total + offset) * plane;
                        g.extend_from_slice(&gy[start..start + c * plane]);
                    }
                    offset += c;
                    out.push((p, g));
                }
                out
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(&out_shape, *axis);
                let mut g = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let mut dot = E::zero();
                        for l in 0..len {
                            dot += gy[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            g[at(l)] = y[at(l)] * (gy[at(l)] - dot);
                        }
                    }
                }
                vec![(*a, g)]
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[2], sa[3], sb[3]);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![E::zero(); da.len()];
                let mut gb = vec![E::zero(); db.len()];
                for bt in 0..sa[0] * sa[1] {
                    let a_m = &da[bt * m * k..(bt + 1) * m * k];
                    let b_m = &db[bt * k * n..(bt + 1) * k * n];
                    let g_m = &gy[bt * m * n..(bt + 1) * m * n];
                    if self.req(*a) {
                        let b_t = kernels::transpose(b_m, k, n);
                        kernels::matmul_acc(g_m, &b_t, &mut ga[bt * m * k..(bt + 1) * m * k], m, n, k);
                    }
                    if self.req(*b) {
                        let a_t = kernels::transpose(a_m, m, k);
                        kernels::matmul_acc(&a_t, g_m, &mut gb[bt * k * n..(bt + 1) * k * n], k, m, n);
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    gy,
                    geom,
                    self.req(*x),
                    b.is_some(),
                );
                let mut out = vec![(*w, dw)];
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = out_shape;
                let (c, plane) = (s[1], s[2] * s[3]);
                let m: E = lit((s[0] * plane) as f64);
                let gd = self.data(*gamma);
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                for n in 0..s[0] {
                    for ch in 0..c {
                        for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                            dgamma[ch] += gy[i] * xhat[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                let mut dx = vec![E::zero(); gy.len()];
                for n in 0..s[0] {
                    for ch in 0..c {
                        for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                            dx[i] = if *batch_stats {
                                // d xhat = gy * gamma; sums over the channel are dbeta*gamma and dgamma*gamma
                                gd[ch] * inv_std[ch] * (gy[i] - (dbeta[ch] + xhat[i] * dgamma[ch]) / m)
                            } else {
                                gd[ch] * inv_std[ch] * gy[i]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::AvgPool(x) => {
                let s = self.shape(*x);
                let g = kernels::adaptive_avg_pool_backward(gy, s[0] * s[1], s[2], s[3], out_shape[2], out_shape[3]);
                vec![(*x, g)]
            }
            Op::Upsample(x) => {
                let s = self.shape(*x);
                let g = kernels::bilinear_backward(gy, s[0] * s[1], s[2], s[3], out_shape[2], out_shape[3]);
                vec![(*x, g)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                count,
            } => {
                let s = self.shape(*logits);
                let (k, plane) = (s[1], s[2] * s[3]);
                let d = self.data(*logits);
                let mut g = vec![E::zero(); d.len()];
                if *count > 0 {
                    let scale = gy[0] / lit(*count as f64);
                    for b in 0..s[0] {
                        for p in 0..plane {
                            let y = labels[b * plane + p];
                            if y == *ignore {
                                continue;
                            }
                            let at = |c: usize| (b * k + c) * plane + p;
                            let m = (0..k).fold(E::neg_infinity(), |m, c| m.max(d[at(c)]));
                            let z = (0..k).fold(E::zero(), |z, c| z + (d[at(c)] - m).exp());
                            for c in 0..k {
                                let prob = (d[at(c)] - m).exp() / z;
                                let target = if c == y as usize { E::one() } else { E::zero() };
                                g[at(c)] = scale * (prob - target);
                            }
                        }
                    }
                }
                vec![(*logits, g)]
            }
            Op::L2Normalize { x, norms } => {
                let (c, plane) = (out_shape[1], out_shape[2] * out_shape[3]);
                let y = node.value.data();
                let mut g = vec![E::zero(); y.len()];
                for n in 0..out_shape[0] {
                    for p in 0..plane {
                        let mut dot = E::zero();
                        for ch in 0..c {
                            let i = (n * c + ch) * plane + p;
                            dot += y[i] * gy[i];
                        }
                        let norm = norms[n * plane + p];
                        for ch in 0..c {
                            let i = (n * c + ch) * plane + p;
                            g[i] = (gy[i] - y[i] * dot) / norm;
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::Gather { x, pixels } => {
                let src = self.value(*x);
                let c = src.shape()[1];
                let mut g = vec![E::zero(); src.numel()];
                for (row, &(n, h, w)) in pixels.iter().enumerate() {
                    for ch in 0..c {
                        g[src.index(n, ch, h, w)] += gy[row * c + ch];
                    }
                }
                vec![(*x, g)]
            }
            Op::Contrastive { sim, anchors } => {
                let size = self.shape(*sim)[2];
                let d = self.data(*sim);
                let mut g = vec![E::zero(); d.len()];
                if !anchors.is_empty() {
                    let outer = gy[0] / lit(anchors.len() as f64);
                    for a in anchors {
                        let row = &d[a.anchor * size..(a.anchor + 1) * size];
                        let grow = &mut g[a.anchor * size..(a.anchor + 1) * size];
                        let w = outer / lit(a.positives.len() as f64);
                        for &p in &a.positives {
                            // term = -s_p + log(exp(s_p) + sum_n exp(s_n))
                            let m = a.negatives.iter().fold(row[p], |m, &j| m.max(row[j]));
                            let ep = (row[p] - m).exp();
                            let z = a.negatives.iter().fold(ep, |z, &j| z + (row[j] - m).exp());
                            grow[p] += w * (ep / z - E::one());
                            for &j in &a.negatives {
                                grow[j] += w * ((row[j] - m).exp() / z);
                            }
                        }
                    }
                }
                vec![(*sim, g)]
            }
        }
    }

    /// Sums a gradient of shape `full` down to the (broadcast) shape of `b`.
    fn reduce_to(&self, gy: &[E], full: &Shape, b: Var) -> Vec<E> {
        let sb = self.shape(b);
        if sb == *full {
            return gy.to_vec();
        }
        let mut g = vec![E::zero(); numel(&sb)];
        for_each_bcast(full, &sb, |ia, ib| g[ib] += gy[ia]);
        g
    }
}

/// `-log(exp(s_p) / (exp(s_p) + sum_n exp(s_n)))` in log-sum-exp form.
fn anchor_term<E: Element>(row: &[E], p: usize, negatives: &[usize]) -> E {
    let m = negatives.iter().fold(row[p], |m, &j| m.max(row[j]));
    let z = negatives.iter().fold((row[p] - m).exp(), |z, &j| z + (row[j] - m).exp());
    z.ln() + m - row[p]
}

/// Visits `(output_index, input_index)` pairs of a permutation.
fn permute_walk(s: &Shape, perm: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let st = strides(s);
    let os: Shape = std::array::from_fn(|i| s[perm[i]]);
    let ps: [usize; 4] = std::array::from_fn(|i| st[perm[i]]);
    let mut io = 0;
    for a in 0..os[0] {
        for b in 0..os[1] {
            for c in 0..os[2] {
                for d in 0..os[3] {
                    f(io, a * ps[0] + b * ps[1] + c * ps[2] + d * ps[3]);
                    io += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(g: &mut Graph<f64>, r: usize, c: usize, d: &[f64]) -> Var {
        g.input(Tensor::matrix(r, c, d.to_vec()).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_hand_cases() {
        let mut g = Graph::<f64>::new();
        let eye = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = mat(&mut g, 2, 2, &[3.0, -1.0, 2.5, 7.0]);
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, -1.0, 2.5, 7.0]);
        let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = mat(&mut g, 2, 1, &[5.0, 6.0]);
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros([1, 1, 2, 3]));
        let b = g.input(Tensor::zeros([1, 1, 2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[1, 1, 2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap());
        let y = g.softmax(x, 3).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.75, epsilon = 1e-12);
        let c = g.input(Tensor::full([1, 1, 1, 5], 3.3));
        let y = g.softmax(c, 3).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn softmax_saturated_input_stays_finite() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::matrix(1, 3, vec![1000.0, -1000.0, 999.0]).unwrap());
        let y = g.softmax(x, 3).unwrap();
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn backward_linear_and_square() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, 2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, -1.5]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, 2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, -1.5]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0, 1.0, 0.0, -3.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_subtract_and_shape_error() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn([1, 2, 1, 3], |_, c, _, w| (c * 3 + w) as f64));
        let m = g.mean_axis(a, 3).unwrap();
        let centred = g.sub(a, m).unwrap();
        assert_eq!(g.value(centred).data(), &[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
        let bad = g.input(Tensor::zeros([1, 3, 1, 1]));
        assert!(g.sub(a, bad).is_err());
    }

    #[test]
    fn concat_and_reductions() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full([2, 1, 1, 2], 1.0));
        let b = g.input(Tensor::full([2, 2, 1, 2], 2.0));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), [2, 3, 1, 2]);
        assert_eq!(&g.value(c).data()[..6], &[1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let s = g.sum_axis(c, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5.0; 4]);
        let m = g.mean(c);
        assert_abs_diff_eq!(g.value(m).item(), 5.0 / 3.0, epsilon = 1e-12);
        let wrong = g.input(Tensor::zeros([1, 1, 1, 2]));
        assert!(g.concat_channels(&[a, wrong]).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn([2, 3, 4, 5], |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f64));
        let p = g.permute(a, [2, 0, 3, 1]).unwrap();
        assert_eq!(g.shape(p), [4, 2, 5, 3]);
        assert_eq!(g.value(p).at(3, 1, 4, 2), 1234.0);
        let back = g.permute(p, [1, 3, 0, 2]).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
    }

    #[test]
    fn relu_scalar_ops() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::matrix(1, 3, vec![-1.0, 0.5, 2.0]).unwrap());
        let r = g.relu(a);
        assert_eq!(g.value(r).data(), &[0.0, 0.5, 2.0]);
        let s = g.scale(a, 2.0);
        let t = g.add_scalar(s, 1.0);
        assert_eq!(g.value(t).data(), &[-1.0, 2.0, 5.0]);
    }

    #[test]
    fn fault_injection_perturbs_named_op() {
        let mut g = Graph::<f64>::new();
        g.inject_fault(Some(OpKind::Relu));
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_abs_diff_eq!(g.grad(x).unwrap()[0], 1.01, epsilon = 1e-12);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
