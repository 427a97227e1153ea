//! Binary weight distributions and their propagation to Gaussian
//! pre-activations, binarization and Concrete sampling.
//!
//! Every operation exists twice: a value-level function on [`Tensor`]s, and
//! a `*_tape` variant that records the same computation for
//! differentiation.

use crate::error::{Error, Result};
use crate::linalg::{self, ConvGeometry};
use crate::math;
use crate::rng::RngStream;
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;

/// Per-weight logits `W` with `P(B = -1) = sigmoid(W)` over `{-1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryWeightDistribution {
    logits: Tensor,
}

impl BinaryWeightDistribution {
    pub fn new(logits: Tensor) -> Result<Self> {
        logits.check_finite("weight logits")?;
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor {
        &mut self.logits
    }

    pub fn shape(&self) -> &[usize] {
        self.logits.shape()
    }

    /// `P(B = -1) = sigmoid(W)`.
    pub fn p_minus(&self) -> Tensor {
        self.logits.map(math::sigmoid)
    }

    /// `E[B] = 1 - 2 sigmoid(W)`.
    pub fn mean(&self) -> Tensor {
        self.logits.map(|w| 1.0 - 2.0 * math::sigmoid(w))
    }

    /// `V[B] = 1 - E[B]^2`.
    pub fn variance(&self) -> Tensor {
        self.mean().map(|m| 1.0 - m * m)
    }
}

/// Independent Gaussian pre-activations `N(mean, var)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianActivation {
    pub mean: Tensor,
    pub var: Tensor,
}

impl GaussianActivation {
    pub fn new(mean: Tensor, var: Tensor) -> Result<Self> {
        mean.expect_same_shape(&var, "gaussian activation")?;
        if let Some(i) = var.data().iter().position(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "gaussian activation",
                detail: alloc::format!("negative variance at element {}", i),
            });
        }
        Ok(Self { mean, var })
    }
}

/// Tape handles of a [`GaussianActivation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianVars {
    pub mean: Var,
    pub var: Var,
}

/// Per-element `q = P(a = -1)` on `{-1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryActivationDistribution {
    pub q: Tensor,
}

/// The linear map `f` of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearKind {
    /// `h: [N, in]`, weights `[out, in]`.
    Dense,
    /// `h: [N, C, H, W]`, weights `[O, C, kh, kw]`.
    Conv2d(ConvGeometry),
}

fn apply_linear(h: &Tensor, w: &Tensor, kind: LinearKind) -> Result<Tensor> {
    match kind {
        LinearKind::Dense => linalg::matmul_t(h, w),
        LinearKind::Conv2d(geom) => linalg::conv2d(h, w, geom),
    }
}

pub(crate) fn apply_linear_tape(tape: &mut Tape, h: Var, w: Var, kind: LinearKind) -> Result<Var> {
    match kind {
        LinearKind::Dense => tape.matmul_t(h, w),
        LinearKind::Conv2d(geom) => tape.conv2d(h, w, geom),
    }
}

/// Gaussian (CLT) pre-activations of `B h`: `mean = f(E[B], h)`,
/// `var = f(V[B], h^2)`.
pub fn clt_forward(h: &Tensor, w: &BinaryWeightDistribution, kind: LinearKind) -> Result<GaussianActivation> {
    let mean = apply_linear(h, &w.mean(), kind)?;
    let var = apply_linear(&h.map(|x| x * x), &w.variance(), kind)?;
    GaussianActivation::new(mean, var)
}

/// `(E[B], V[B])` recorded on the tape from logits.
pub fn weight_moments_tape(tape: &mut Tape, logits: Var) -> Result<(Var, Var)> {
    let p = tape.sigmoid(logits)?;
    let m = tape.scale(p, -2.0)?;
    let mean = tape.add_scalar(m, 1.0)?;
    let sq = tape.square(mean)?;
    let neg = tape.neg(sq)?;
    let var = tape.add_scalar(neg, 1.0)?;
    Ok((mean, var))
}

/// Tape version of [`clt_forward`] taking precomputed weight moments. The
/// optional bias (one per output channel) shifts the mean only.
pub fn clt_forward_tape(
    tape: &mut Tape,
    h: Var,
    w_mean: Var,
    w_var: Var,
    kind: LinearKind,
    bias: Option<Var>,
) -> Result<GaussianVars> {
    let mut mean = apply_linear_tape(tape, h, w_mean, kind)?;
    if let Some(b) = bias {
        mean = tape.channel_affine(mean, None, Some(b))?;
    }
    let h2 = tape.square(h)?;
    let var = apply_linear_tape(tape, h2, w_var, kind)?;
    Ok(GaussianVars { mean, var })
}

/// `q = P(a < 0)` of each Gaussian pre-activation.
pub fn binarize(ga: &GaussianActivation) -> Result<BinaryActivationDistribution> {
    let q = ga.mean.zip_map(&ga.var, "binarize", math::gaussian_cdf_at_zero)?;
    Ok(BinaryActivationDistribution { q })
}

pub fn binarize_tape(tape: &mut Tape, g: GaussianVars) -> Result<Var> {
    tape.gaussian_cdf_at_zero(g.mean, g.var)
}

/// Binary Concrete sample in (-1, 1) for each `q`.
pub fn concrete_sample(bad: &BinaryActivationDistribution, tau: f64, rng: &mut RngStream) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("temperature must be positive, got {}", tau)));
    }
    let data = bad
        .q
        .data()
        .iter()
        .map(|&q| tape::concrete_value(q, rng.logistic(), tau))
        .collect();
    Tensor::new(bad.q.shape().to_vec(), data)
}

/// Tape version of [`concrete_sample`]; draws one logistic noise value per
/// element of `q` in row-major order.
pub fn concrete_sample_tape(tape: &mut Tape, q: Var, tau: f64, rng: &mut RngStream) -> Result<Var> {
    let noise = rng.logistics(tape.value(q).len());
    tape.concrete(q, noise, tau)
}

/// Reparameterized sample `mean + sqrt(var) * eps`, `eps ~ N(0, 1)`.
pub fn sample_gaussian(ga: &GaussianActivation, rng: &mut RngStream) -> Tensor {
    let data = ga
        .mean
        .data()
        .iter()
        .zip(ga.var.data())
        .map(|(&m, &v)| m + math::sqrt(v) * rng.normal())
        .collect();
    Tensor::new(ga.mean.shape().to_vec(), data).expect("shape preserved")
}

pub fn sample_gaussian_tape(tape: &mut Tape, g: GaussianVars, rng: &mut RngStream) -> Result<Var> {
    let eps = Tensor::new(tape.shape(g.mean).to_vec(), rng.normals(tape.value(g.mean).len()))?;
    let eps = tape.constant(eps)?;
    let sd = tape.sqrt(g.var)?;
    let noise = tape.mul(sd, eps)?;
    tape.add(g.mean, noise)
}

/// One `±1` weight instantiation: `-1` with probability `sigmoid(W)`.
pub fn sample_weights(w: &BinaryWeightDistribution, rng: &mut RngStream) -> Tensor {
    w.p_minus().map(|p| if rng.bernoulli(p) { -1.0 } else { 1.0 })
}

/// Most likely weights; ties (`W = 0`) resolve to `+1`.
pub fn map_weights(w: &BinaryWeightDistribution) -> Tensor {
    w.logits.map(|l| if l > 0.0 { -1.0 } else { 1.0 })
}
