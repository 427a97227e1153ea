//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node holding its forward value and the
//! references it needs for the backward rule, so nodes are stored in
//! topological order by construction. [`Tape::backward`] walks the nodes in
//! reverse exactly once and returns the gradient of a scalar seed with
//! respect to every parameter leaf it depends on.
//!
//! A tape is single-writer and is not consumed by `backward`; call
//! [`Tape::clear`] (or drop it) between training steps. Every primitive
//! checks its output for NaN/Inf and fails with [`Error::NonFinite`] instead
//! of propagating it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::linalg::{self, ConvGeometry, ConvShape, MatView};
use crate::math;
use crate::tensor::{channel_layout, ChannelLayout, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

/// Identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

/// Gradients keyed by parameter, each shaped like its parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => {
                self.grads.insert(id, g);
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Recip(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    Clip { x: usize, lo: f64, hi: f64 },
    GaussCdf { mean: usize, var: usize },
    Concrete { q: usize, noise: Vec<f64>, tau: f64 },
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Conv2d { x: usize, w: usize, shape: ConvShape },
    Sum(usize),
    Mean(usize),
    ChannelSum { x: usize, layout: ChannelLayout },
    ChannelAffine { x: usize, scale: Option<usize>, shift: Option<usize>, layout: ChannelLayout },
    Reshape(usize),
    Gather { x: usize, indices: Vec<usize> },
    LogSoftmaxNll { logits: usize, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower bound applied to `q` before taking Concrete log-odds.
pub const CONCRETE_Q_CLAMP: f64 = 1e-7;

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; previously issued [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar { index: v.index });
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("var from another tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        value.check_finite(op_name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// A constant input; gradients do not flow into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// A trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<Var> {
        self.push(value, Op::Param(id), "param")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, name, f)?;
        Ok((ia, ib, out))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor)> {
        let ia = self.idx(a)?;
        Ok((ia, self.nodes[ia].value.map(f)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(ia, ib), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(ia, ib), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(ia, ib), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(out, Op::Div(ia, ib), "div")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.unary(a, |x| -x)?;
        self.push(out, Op::Neg(ia), "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (ia, out) = self.unary(a, |x| x * c)?;
        self.push(out, Op::Scale(ia, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (ia, out) = self.unary(a, |x| x + c)?;
        self.push(out, Op::AddScalar(ia), "add_scalar")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.unary(a, |x| 1.0 / x)?;
        self.push(out, Op::Recip(ia), "recip")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.unary(a, math::sigmoid)?;
        self.push(out, Op::Sigmoid(ia), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.unary(a, math::exp)?;
        self.push(out, Op::Exp(ia), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if let Some(i) = self.nodes[ia].value.data().iter().position(|&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input at element {}", i),
            });
        }
        let out = self.nodes[ia].value.map(math::ln);
        self.push(out, Op::Log(ia), "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if let Some(i) = self.nodes[ia].value.data().iter().position(|&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input at element {}", i),
            });
        }
        let out = self.nodes[ia].value.map(math::sqrt);
        self.push(out, Op::Sqrt(ia), "sqrt")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.unary(a, |x| x * x)?;
        self.push(out, Op::Square(ia), "square")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.unary(a, math::tanh)?;
        self.push(out, Op::Tanh(ia), "tanh")
    }

    /// Clamp to `[lo, hi]`; the gradient passes inside the interval and is
    /// zero outside it.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clip bounds {} > {}", lo, hi)));
        }
        let (ia, out) = self.unary(a, |x| x.clamp(lo, hi))?;
        self.push(out, Op::Clip { x: ia, lo, hi }, "clip")
    }

    /// `P(a < 0)` for `a ~ N(mean, var)`, elementwise.
    pub fn gaussian_cdf_at_zero(&mut self, mean: Var, var: Var) -> Result<Var> {
        let (im, iv) = (self.idx(mean)?, self.idx(var)?);
        let vals = &self.nodes[iv].value;
        if let Some(i) = vals.data().iter().position(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "gaussian_cdf_at_zero",
                detail: format!("negative variance at element {}", i),
            });
        }
        let out = self.nodes[im].value.zip_map(vals, "gaussian_cdf_at_zero", math::gaussian_cdf_at_zero)?;
        self.push(out, Op::GaussCdf { mean: im, var: iv }, "gaussian_cdf_at_zero")
    }

    /// Binary Concrete relaxation of `Bern±(q)` mapped to (-1, 1).
    ///
    /// With `q` clamped to `[1e-7, 1 - 1e-7]`, `log_alpha = log((1 - q) / q)`
    /// is the log-odds of `+1`; the output is `2 * sigmoid((log_alpha + L) / tau) - 1`
    /// where `noise` holds the logistic samples `L`.
    pub fn concrete(&mut self, q: Var, noise: Vec<f64>, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", tau)));
        }
        let iq = self.idx(q)?;
        let qv = &self.nodes[iq].value;
        if noise.len() != qv.len() {
            return Err(Error::ShapeMismatch {
                op: "concrete noise",
                lhs: qv.shape().to_vec(),
                rhs: vec![noise.len()],
            });
        }
        let data = qv
            .data()
            .iter()
            .zip(&noise)
            .map(|(&q, &l)| concrete_value(q, l, tau))
            .collect();
        let out = Tensor::new(qv.shape().to_vec(), data)?;
        self.push(out, Op::Concrete { q: iq, noise, tau }, "concrete")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = linalg::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push(out, Op::MatMul(ia, ib), "matmul")
    }

    /// `a @ b^T`, the dense-layer product for `[batch, in] x [out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = linalg::matmul_t(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push(out, Op::MatMulT(ia, ib), "matmul_t")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let shape = ConvShape::resolve(self.nodes[ix].value.shape(), self.nodes[iw].value.shape(), geom)?;
        let out = linalg::conv2d_raw(self.nodes[ix].value.data(), self.nodes[iw].value.data(), &shape);
        let out = Tensor::new(shape.out_shape().to_vec(), out)?;
        self.push(out, Op::Conv2d { x: ix, w: iw, shape }, "conv2d")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.nodes[ia].value.is_empty() {
            return Err(Error::EmptyReduction("sum"));
        }
        let s = self.nodes[ia].value.sum();
        self.push(Tensor::scalar(s), Op::Sum(ia), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let n = self.nodes[ia].value.len();
        if n == 0 {
            return Err(Error::EmptyReduction("mean"));
        }
        let s = self.nodes[ia].value.sum() / n as f64;
        self.push(Tensor::scalar(s), Op::Mean(ia), "mean")
    }

    /// Sum over every axis except axis 1, giving a `[C]` tensor.
    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let layout = channel_layout(self.nodes[ia].value.shape())?;
        if layout.per_channel() == 0 {
            return Err(Error::EmptyReduction("channel_sum"));
        }
        let out = channel_sum_raw(self.nodes[ia].value.data(), layout);
        self.push(Tensor::from_vec(out), Op::ChannelSum { x: ia, layout }, "channel_sum")
    }

    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let m = channel_layout(self.shape(a))?.per_channel();
        let s = self.channel_sum(a)?;
        self.scale(s, 1.0 / m as f64)
    }

    /// Unbiased (`M - 1`) per-channel variance.
    pub fn channel_var(&mut self, a: Var) -> Result<Var> {
        let m = channel_layout(self.shape(a))?.per_channel();
        if m < 2 {
            return Err(Error::InvalidArgument("channel variance needs at least two elements per channel".into()));
        }
        let mean = self.channel_mean(a)?;
        let shift = self.neg(mean)?;
        let centered = self.channel_affine(a, None, Some(shift))?;
        let sq = self.square(centered)?;
        let ss = self.channel_sum(sq)?;
        self.scale(ss, 1.0 / (m - 1) as f64)
    }

    /// `y = x * scale[c] + shift[c]` with `c` the axis-1 index.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let ix = self.idx(x)?;
        let layout = channel_layout(self.nodes[ix].value.shape())?;
        let is = scale.map(|v| self.idx(v)).transpose()?;
        let it = shift.map(|v| self.idx(v)).transpose()?;
        for i in [is, it].into_iter().flatten() {
            if self.nodes[i].value.shape() != [layout.channels] {
                return Err(Error::ShapeMismatch {
                    op: "channel_affine",
                    lhs: self.nodes[ix].value.shape().to_vec(),
                    rhs: self.nodes[i].value.shape().to_vec(),
                });
            }
        }
        let xv = self.nodes[ix].value.data();
        let sv = is.map(|i| self.nodes[i].value.data());
        let tv = it.map(|i| self.nodes[i].value.data());
        let data = channel_map(xv, layout, |x, c| {
            let y = match sv {
                Some(s) => x * s[c],
                None => x,
            };
            match tv {
                Some(t) => y + t[c],
                None => y,
            }
        });
        let out = Tensor::new(self.nodes[ix].value.shape().to_vec(), data)?;
        self.push(out, Op::ChannelAffine { x: ix, scale: is, shift: it, layout }, "channel_affine")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape)?;
        self.push(out, Op::Reshape(ia), "reshape")
    }

    /// `out[i] = x[indices[i]]` over flat indices, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.nodes[ix].value.data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::InvalidArgument(format!("gather index {} out of range {}", bad, xv.len())));
        }
        let data = indices.iter().map(|&i| xv[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::Gather { x: ix, indices }, "gather")
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn log_softmax_nll(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "log_softmax_nll",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let classes = lv.shape()[1];
        if targets.is_empty() {
            return Err(Error::EmptyReduction("log_softmax_nll"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!("target {} out of range for {} classes", t, classes)));
        }
        let mut total = 0.0;
        for (row, &t) in lv.data().chunks(classes).zip(targets) {
            total -= log_softmax_row(row)[t];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        self.push(
            out,
            Op::LogSoftmaxNll {
                logits: il,
                targets: targets.to_vec(),
            },
            "log_softmax_nll",
        )
    }

    /// Reverse-mode gradients of the scalar `seed` for every parameter leaf
    /// it depends on.
    pub fn backward(&self, seed: Var) -> Result<GradientMap> {
        let is = self.idx(seed)?;
        if self.nodes[is].value.len() != 1 {
            return Err(Error::NonScalarSeed(self.nodes[is].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=is).map(|_| None).collect();
        grads[is] = Some(Tensor::full(self.nodes[is].value.shape(), 1.0));
        let mut out = GradientMap::default();

        for i in (0..=is).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], out: &mut GradientMap) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.val(*b), "mul grad", |g, y| g * y)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.val(*a), "mul grad", |g, x| g * x)?);
                }
            }
            Op::Div(a, b) => {
                let bv = self.val(*b);
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(bv, "div grad", |g, d| g / d)?);
                }
                if self.wants(*b) {
                    let gy = g.zip_map(y, "div grad", |g, q| g * q)?;
                    accumulate(grads, *b, gy.zip_map(bv, "div grad", |gq, d| -gq / d)?);
                }
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::Recip(a) => accumulate(grads, *a, g.zip_map(y, "recip grad", |g, r| -g * r * r)?),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(y, "sigmoid grad", |g, s| g * s * (1.0 - s))?),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(y, "exp grad", |g, e| g * e)?),
            Op::Log(a) => accumulate(grads, *a, g.zip_map(self.val(*a), "log grad", |g, x| g / x)?),
            Op::Sqrt(a) => accumulate(grads, *a, g.zip_map(y, "sqrt grad", |g, r| if r > 0.0 { g * 0.5 / r } else { 0.0 })?),
            Op::Square(a) => accumulate(grads, *a, g.zip_map(self.val(*a), "square grad", |g, x| 2.0 * g * x)?),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(y, "tanh grad", |g, t| g * (1.0 - t * t))?),
            Op::Clip { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                accumulate(grads, *x, g.zip_map(self.val(*x), "clip grad", |g, v| if v >= lo && v <= hi { g } else { 0.0 })?)
            }
            Op::GaussCdf { mean, var } => {
                let (mv, vv) = (self.val(*mean).data(), self.val(*var).data());
                let mut dm = Vec::with_capacity(g.len());
                let mut dv = Vec::with_capacity(g.len());
                for ((&g, &m), &v) in g.data().iter().zip(mv).zip(vv) {
                    let (a, b) = math::gaussian_cdf_at_zero_grad(m, v);
                    dm.push(g * a);
                    dv.push(g * b);
                }
                let shape = g.shape().to_vec();
                if self.wants(*mean) {
                    accumulate(grads, *mean, Tensor::new(shape.clone(), dm)?);
                }
                if self.wants(*var) {
                    accumulate(grads, *var, Tensor::new(shape, dv)?);
                }
            }
            Op::Concrete { q, noise, tau } => {
                let qv = self.val(*q).data();
                let data = g
                    .data()
                    .iter()
                    .zip(qv)
                    .zip(noise)
                    .map(|((&g, &q), &l)| g * concrete_grad(q, l, *tau))
                    .collect();
                accumulate(grads, *q, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    // dA = G [m,n] @ B^T
                    let mut d = vec![0.0; m * k];
                    linalg::gemm(1.0, g.data(), MatView::row_major(m, n), bv.data(), MatView::transposed(k, n), 0.0, &mut d, MatView::row_major(m, k));
                    accumulate(grads, *a, Tensor::new(vec![m, k], d)?);
                }
                if self.wants(*b) {
                    // dB = A^T @ G
                    let mut d = vec![0.0; k * n];
                    linalg::gemm(1.0, av.data(), MatView::transposed(m, k), g.data(), MatView::row_major(m, n), 0.0, &mut d, MatView::row_major(k, n));
                    accumulate(grads, *b, Tensor::new(vec![k, n], d)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.wants(*a) {
                    // dA = G [m,n] @ B [n,k]
                    let mut d = vec![0.0; m * k];
                    linalg::gemm(1.0, g.data(), MatView::row_major(m, n), bv.data(), MatView::row_major(n, k), 0.0, &mut d, MatView::row_major(m, k));
                    accumulate(grads, *a, Tensor::new(vec![m, k], d)?);
                }
                if self.wants(*b) {
                    // dB = G^T [n,m] @ A [m,k]
                    let mut d = vec![0.0; n * k];
                    linalg::gemm(1.0, g.data(), MatView::transposed(m, n), av.data(), MatView::row_major(m, k), 0.0, &mut d, MatView::row_major(n, k));
                    accumulate(grads, *b, Tensor::new(vec![n, k], d)?);
                }
            }
            Op::Conv2d { x, w, shape } => {
                let (dx, dw) = linalg::conv2d_backward_raw(
                    self.val(*x).data(),
                    self.val(*w).data(),
                    g.data(),
                    shape,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(self.val(*x).shape().to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, Tensor::new(self.val(*w).shape().to_vec(), dw)?);
                }
            }
            Op::Sum(a) => {
                let g = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.val(*a).shape(), g));
            }
            Op::Mean(a) => {
                let av = self.val(*a);
                let g = g.data()[0] / av.len() as f64;
                accumulate(grads, *a, Tensor::full(av.shape(), g));
            }
            Op::ChannelSum { x, layout } => {
                let gv = g.data();
                let shape = self.val(*x).shape();
                let d = Tensor::new(shape.to_vec(), channel_map(&vec![0.0; shape.iter().product()], *layout, |_, c| gv[c]))?;
                accumulate(grads, *x, d);
            }
            Op::ChannelAffine { x, scale, shift, layout } => {
                let xv = self.val(*x);
                if self.wants(*x) {
                    let d = match scale {
                        Some(s) => {
                            let sv = self.val(*s).data();
                            Tensor::new(xv.shape().to_vec(), channel_map(g.data(), *layout, |g, c| g * sv[c]))?
                        }
                        None => g.clone(),
                    };
                    accumulate(grads, *x, d);
                }
                if let Some(s) = scale.filter(|&s| self.wants(s)) {
                    let prod: Vec<f64> = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).collect();
                    accumulate(grads, s, Tensor::from_vec(channel_sum_raw(&prod, *layout)));
                }
                if let Some(t) = shift.filter(|&t| self.wants(t)) {
                    accumulate(grads, t, Tensor::from_vec(channel_sum_raw(g.data(), *layout)));
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(self.val(*a).shape())?),
            Op::Gather { x, indices } => {
                let mut d = Tensor::zeros(self.val(*x).shape());
                let dd = d.data_mut();
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    dd[i] += gv;
                }
                accumulate(grads, *x, d);
            }
            Op::LogSoftmaxNll { logits, targets } => {
                let lv = self.val(*logits);
                let classes = lv.shape()[1];
                let scale = g.data()[0] / targets.len() as f64;
                let mut d = Vec::with_capacity(lv.len());
                for (row, &t) in lv.data().chunks(classes).zip(targets) {
                    let ls = log_softmax_row(row);
                    for (c, l) in ls.iter().enumerate() {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        d.push(scale * (math::exp(*l) - onehot));
                    }
                }
                accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Param(_) => Vec::new(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::MatMulT(a, b) => vec![*a, *b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Recip(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Square(a)
        | Op::Tanh(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![*a],
        Op::Clip { x, .. } | Op::ChannelSum { x, .. } | Op::Gather { x, .. } => vec![*x],
        Op::GaussCdf { mean, var } => vec![*mean, *var],
        Op::Concrete { q, .. } => vec![*q],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::ChannelAffine { x, scale, shift, .. } => {
            let mut v = vec![*x];
            v.extend(scale.iter().chain(shift.iter()).copied());
            v
        }
        Op::LogSoftmaxNll { logits, .. } => vec![*logits],
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn channel_map(x: &[f64], layout: ChannelLayout, f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for (block, chunk) in x.chunks(layout.inner.max(1)).enumerate() {
        let c = block % layout.channels;
        out.extend(chunk.iter().map(|&v| f(v, c)));
    }
    out
}

fn channel_sum_raw(x: &[f64], layout: ChannelLayout) -> Vec<f64> {
    let mut out = vec![0.0; layout.channels];
    for (block, chunk) in x.chunks(layout.inner.max(1)).enumerate() {
        out[block % layout.channels] += chunk.iter().sum::<f64>();
    }
    out
}

/// Numerically stable `log softmax` of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + math::ln(row.iter().map(|&x| math::exp(x - max)).sum::<f64>());
    row.iter().map(|&x| x - lse).collect()
}

/// Forward value of the Concrete relaxation for one element.
#[inline]
pub fn concrete_value(q: f64, logistic: f64, tau: f64) -> f64 {
    let q = q.clamp(CONCRETE_Q_CLAMP, 1.0 - CONCRETE_Q_CLAMP);
    let log_alpha = math::ln(1.0 - q) - math::ln(q);
    2.0 * math::sigmoid((log_alpha + logistic) / tau) - 1.0
}

/// `d concrete_value / d q`; zero where `q` was clamped.
#[inline]
pub fn concrete_grad(q: f64, logistic: f64, tau: f64) -> f64 {
    if q < CONCRETE_Q_CLAMP || q > 1.0 - CONCRETE_Q_CLAMP {
        return 0.0;
    }
    let log_alpha = math::ln(1.0 - q) - math::ln(q);
    let y = math::sigmoid((log_alpha + logistic) / tau);
    -2.0 * y * (1.0 - y) / (tau * q * (1.0 - q))
}
