//! Batch normalization and max pooling on Gaussian pre-activations.
//!
//! Batch norm uses the expected batch mean and variance under the
//! pre-activation distribution. Per channel, with `M` the number of
//! activations reduced into the statistic:
//!
//! ```text
//! E[m] = 1/M * sum(mu_i)
//! E[v] = 1/(M-1) * (sum(var_i) + sum((mu_i - E[m])^2))
//! mu'  = gamma * (mu - E[m]) / sqrt(E[v] + eps) + beta
//! var' = gamma^2 * var / (E[v] + eps)
//! ```
//!
//! Max pooling draws one sample per input element and propagates the
//! `(mu, var)` pair of the element whose sample is largest.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::RngStream;
use crate::stochastic::{GaussianActivation, GaussianVars};
use crate::tape::{Tape, Var};
use crate::tensor::{channel_layout, Tensor};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Weight of the newest batch in the running statistics.
    pub momentum: f64,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            eps: DEFAULT_BN_EPS,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("batch norm eps must be positive".into()));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("running variance must be non-negative".into()));
        }
        let c = self.channels();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch norm params",
                    lhs: vec![c],
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the expected batch statistics.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Expected per-channel batch mean and variance of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch norm on the tape. `var = None` treats the input as deterministic
/// (ordinary batch norm); otherwise it is the Gaussian variance.
///
/// Returns the normalized mean and variance (the latter `None` when the
/// input was deterministic) and, in train mode, the batch statistics for
/// the caller to fold into the running estimates.
pub fn batchnorm_tape(
    tape: &mut Tape,
    mean: Var,
    var: Option<Var>,
    gamma: Var,
    beta: Var,
    params: &BnParams,
    mode: BnMode,
) -> Result<(Var, Option<Var>, Option<BnBatchStats>)> {
    let layout = channel_layout(tape.shape(mean))?;
    if layout.channels != params.channels() {
        return Err(Error::ShapeMismatch {
            op: "batch norm",
            lhs: tape.shape(mean).to_vec(),
            rhs: vec![params.channels()],
        });
    }
    let (centered_shift, v, stats) = match mode {
        BnMode::Train => {
            let m = layout.per_channel();
            if m < 2 {
                return Err(Error::InvalidArgument(alloc::format!(
                    "batch norm in train mode needs at least 2 activations per channel, got {}",
                    m
                )));
            }
            let em = tape.channel_mean(mean)?;
            let shift = tape.neg(em)?;
            let centered = tape.channel_affine(mean, None, Some(shift))?;
            let sq = tape.square(centered)?;
            let mut ss = tape.channel_sum(sq)?;
            if let Some(var) = var {
                let vs = tape.channel_sum(var)?;
                ss = tape.add(ss, vs)?;
            }
            let ev = tape.scale(ss, 1.0 / (m - 1) as f64)?;
            let stats = BnBatchStats {
                mean: tape.value(em).data().to_vec(),
                var: tape.value(ev).data().to_vec(),
            };
            (shift, ev, Some(stats))
        }
        BnMode::Eval => {
            let rm = tape.constant(params.running_mean.map(|x| -x))?;
            let rv = tape.constant(params.running_var.clone())?;
            (rm, rv, None)
        }
    };
    let ve = tape.add_scalar(v, params.eps)?;
    let sd = tape.sqrt(ve)?;
    let inv = tape.recip(sd)?;
    let scale = tape.mul(gamma, inv)?;
    // gamma * (mu - m) / sd + beta == scale * mu + (beta - scale * m)
    let sm = tape.mul(scale, centered_shift)?;
    let shift = tape.add(beta, sm)?;
    let out_mean = tape.channel_affine(mean, Some(scale), Some(shift))?;
    let out_var = match var {
        Some(var) => {
            let s2 = tape.square(scale)?;
            Some(tape.channel_affine(var, Some(s2), None)?)
        }
        None => None,
    };
    Ok((out_mean, out_var, stats))
}

/// Value-level stochastic batch norm. In train mode the running statistics
/// of `params` are updated.
pub fn stoch_batchnorm(ga: &GaussianActivation, params: &mut BnParams, mode: BnMode) -> Result<GaussianActivation> {
    params.validate()?;
    let mut tape = Tape::new();
    let m = tape.constant(ga.mean.clone())?;
    let v = tape.constant(ga.var.clone())?;
    let g = tape.constant(params.gamma.clone())?;
    let b = tape.constant(params.beta.clone())?;
    let (om, ov, stats) = batchnorm_tape(&mut tape, m, Some(v), g, b, params, mode)?;
    if let Some(stats) = stats {
        params.update_running(&stats);
    }
    let ov = ov.expect("variance propagated");
    GaussianActivation::new(tape.value(om).clone(), tape.value(ov).clone())
}

/// Pooling window; `stride == window` for the usual non-overlapping case.
/// Trailing rows/columns that do not fill a window are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn square(window: usize) -> Self {
        Self { window, stride: window }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument("pool window and stride must be positive".into()));
        }
        if h < self.window || w < self.window {
            return Err(Error::InvalidShape {
                op: "max pool",
                detail: alloc::format!("{}x{} input smaller than window {}", h, w, self.window),
            });
        }
        Ok(((h - self.window) / self.stride + 1, (w - self.window) / self.stride + 1))
    }

    /// Output shape of pooling an `[N, C, H, W]` tensor.
    pub fn output_shape(&self, shape: &[usize]) -> Result<[usize; 4]> {
        if shape.len() != 4 {
            return Err(Error::InvalidShape {
                op: "max pool",
                detail: alloc::format!("expected NCHW, got {:?}", shape),
            });
        }
        let (oh, ow) = self.output_hw(shape[2], shape[3])?;
        Ok([shape[0], shape[1], oh, ow])
    }
}

/// Flat input index of the maximum of every pooling window. Ties go to the
/// lowest linear index.
pub fn argmax_pool_indices(values: &[f64], shape: &[usize], geom: PoolGeometry) -> Result<Vec<usize>> {
    let [n, c, oh, ow] = geom.output_shape(shape)?;
    let (h, w) = (shape[2], shape[3]);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * geom.stride * w + ox * geom.stride;
                for dy in 0..geom.window {
                    for dx in 0..geom.window {
                        let i = base + (oy * geom.stride + dy) * w + ox * geom.stride + dx;
                        if values[i] > values[best] {
                            best = i;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Ok(out)
}

/// Stochastic max pooling on the tape. One standard normal per input
/// element is drawn in row-major order; the selected indices are returned
/// for inspection and are treated as constants by the backward pass.
pub fn stoch_maxpool_tape(tape: &mut Tape, g: GaussianVars, geom: PoolGeometry, rng: &mut RngStream) -> Result<(GaussianVars, Vec<usize>)> {
    let shape = tape.shape(g.mean).to_vec();
    let out_shape = geom.output_shape(&shape)?;
    let samples: Vec<f64> = tape
        .value(g.mean)
        .data()
        .iter()
        .zip(tape.value(g.var).data())
        .map(|(&m, &v)| m + math::sqrt(v.max(0.0)) * rng.normal())
        .collect();
    let idx = argmax_pool_indices(&samples, &shape, geom)?;
    let mean = tape.gather(g.mean, idx.clone(), &out_shape)?;
    let var = tape.gather(g.var, idx.clone(), &out_shape)?;
    Ok((GaussianVars { mean, var }, idx))
}

/// Deterministic max pooling on the tape.
pub fn maxpool_tape(tape: &mut Tape, x: Var, geom: PoolGeometry) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let out_shape = geom.output_shape(&shape)?;
    let idx = argmax_pool_indices(tape.value(x).data(), &shape, geom)?;
    tape.gather(x, idx, &out_shape)
}

/// Value-level stochastic max pooling; also returns the selected flat
/// input index for every output element.
pub fn stoch_maxpool(ga: &GaussianActivation, geom: PoolGeometry, rng: &mut RngStream) -> Result<(GaussianActivation, Vec<usize>)> {
    let mut tape = Tape::new();
    let g = GaussianVars {
        mean: tape.constant(ga.mean.clone())?,
        var: tape.constant(ga.var.clone())?,
    };
    let (out, idx) = stoch_maxpool_tape(&mut tape, g, geom, rng)?;
    Ok((GaussianActivation::new(tape.value(out.mean).clone(), tape.value(out.var).clone())?, idx))
}

/// Monte-Carlo estimate of the probability that each element of a pooling
/// region attains the maximum, from `samples` joint draws.
pub fn pool_prob_mc(region: &[(f64, f64)], samples: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("pool_prob_mc needs at least one sample".into()));
    }
    if region.is_empty() {
        return Err(Error::InvalidArgument("empty pooling region".into()));
    }
    let mut counts = vec![0usize; region.len()];
    for _ in 0..samples {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, &(m, v)) in region.iter().enumerate() {
            let s = m + math::sqrt(v.max(0.0)) * rng.normal();
            if s > best_val {
                best = i;
                best_val = s;
            }
        }
        counts[best] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / samples as f64).collect())
}
