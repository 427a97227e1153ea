//! Training objectives.
//!
//! The default objective is mean cross-entropy plus weight decay on the
//! softmax layer plus `beta * sum p (1 - p)` over all binary weights, which
//! pushes the weight distribution towards determinism. The variational
//! bound replaces the regularizer by the negated weight entropy, scaled
//! per training example.

use alloc::vec::Vec;

use crate::arch::NetMode;
use crate::error::{Error, Result};
use crate::math;
use crate::model::Forward;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are kept this far from 0 and 1 inside the entropy.
pub const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    VarianceRegularized,
    VariationalBound,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub beta_var: f64,
    pub wd_softmax: f64,
    pub tau: f64,
    pub kind: ObjectiveKind,
    /// Training-set size; the entropy of the bound is divided by it so the
    /// objective stays a per-example average.
    pub train_size: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta_var: 1e-6,
            wd_softmax: 1e-4,
            tau: 1.0,
            kind: ObjectiveKind::VarianceRegularized,
            train_size: 1,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_var >= 0.0) || !(self.wd_softmax >= 0.0) {
            return Err(Error::InvalidArgument("regularizer weights must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if self.train_size == 0 {
            return Err(Error::InvalidArgument("training-set size must be positive".into()));
        }
        Ok(())
    }
}

/// `sum sigmoid(W) * (1 - sigmoid(W))` over the given logit tensors.
pub fn variance_regularizer(logits: &[&Tensor]) -> f64 {
    logits
        .iter()
        .flat_map(|t| t.data())
        .map(|&w| {
            let p = math::sigmoid(w);
            p * (1.0 - p)
        })
        .sum()
}

pub fn variance_regularizer_tape(tape: &mut Tape, logits: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &w in logits {
        let p = tape.sigmoid(w)?;
        let p2 = tape.square(p)?;
        let v = tape.sub(p, p2)?;
        let s = tape.sum(v)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

fn bernoulli_entropy(p: f64) -> f64 {
    let p = p.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP);
    -(p * math::ln(p) + (1.0 - p) * math::ln(1.0 - p))
}

/// Entropy of the factorized weight distribution, in nats.
pub fn entropy_term(logits: &[&Tensor]) -> f64 {
    logits.iter().flat_map(|t| t.data()).map(|&w| bernoulli_entropy(math::sigmoid(w))).sum()
}

pub fn entropy_term_tape(tape: &mut Tape, logits: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &w in logits {
        let s = tape.sigmoid(w)?;
        let p = tape.clip(s, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)?;
        let np = tape.neg(p)?;
        let q = tape.add_scalar(np, 1.0)?;
        let lp = tape.log(p)?;
        let lq = tape.log(q)?;
        let a = tape.mul(p, lp)?;
        let b = tape.mul(q, lq)?;
        let ab = tape.add(a, b)?;
        let sum = tape.sum(ab)?;
        let h = tape.neg(sum)?;
        total = Some(match total {
            Some(t) => tape.add(t, h)?,
            None => h,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

/// Values of the individual loss terms, already multiplied by their
/// weights, so `total = nll + weight_decay + regularizer`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub weight_decay: f64,
    pub regularizer: f64,
    pub total: f64,
}

/// Records the training loss of a forward pass.
pub fn build_loss(tape: &mut Tape, fwd: &Forward, targets: &[usize], mode: NetMode, cfg: &ObjectiveConfig) -> Result<(Var, LossParts)> {
    let nll = tape.log_softmax_nll(fwd.logits, targets)?;
    let mut terms: Vec<Var> = Vec::new();

    let ws = tape.square(fwd.softmax_weight)?;
    let bs = tape.square(fwd.softmax_bias)?;
    let ws = tape.sum(ws)?;
    let bs = tape.sum(bs)?;
    let sq = tape.add(ws, bs)?;
    let wd = tape.scale(sq, cfg.wd_softmax)?;
    terms.push(wd);

    let reg = match (mode, cfg.kind) {
        (NetMode::FullPrecision, _) => None,
        (NetMode::Binary, ObjectiveKind::VarianceRegularized) => {
            let r = variance_regularizer_tape(tape, &fwd.weights)?;
            Some(tape.scale(r, cfg.beta_var)?)
        }
        (NetMode::Binary, ObjectiveKind::VariationalBound) => {
            let h = entropy_term_tape(tape, &fwd.weights)?;
            Some(tape.scale(h, -1.0 / cfg.train_size as f64)?)
        }
    };
    let mut total = tape.add(nll, wd)?;
    if let Some(r) = reg {
        total = tape.add(total, r)?;
    }
    let parts = LossParts {
        nll: tape.value(nll).item()?,
        weight_decay: tape.value(wd).item()?,
        regularizer: match reg {
            Some(r) => tape.value(r).item()?,
            None => 0.0,
        },
        total: tape.value(total).item()?,
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ParamId;

    #[test]
    fn regularizer_values() {
        assert_eq!(variance_regularizer(&[&Tensor::scalar(0.0)]), 0.25);
        let w = math::ln(0.05 / 0.95);
        assert!((variance_regularizer(&[&Tensor::scalar(w)]) - 0.0475).abs() < 1e-12);
    }

    #[test]
    fn regularizer_stationary_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), Tensor::scalar(0.0)).unwrap();
        let r = variance_regularizer_tape(&mut tape, &[w]).unwrap();
        let g = tape.backward(r).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn entropy_values() {
        assert!((entropy_term(&[&Tensor::scalar(0.0)]) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!(entropy_term(&[&Tensor::scalar(60.0)]) < 1e-10);
        assert!(entropy_term(&[&Tensor::scalar(-60.0)]) < 1e-10);
        let one = entropy_term(&[&Tensor::scalar(0.7)]);
        let many = entropy_term(&[&Tensor::full(&[5], 0.7)]);
        assert!((many - 5.0 * one).abs() < 1e-12);
    }

    #[test]
    fn entropy_tape_matches_value() {
        let t = Tensor::from_vec(alloc::vec![-3.0, -0.2, 0.0, 1.5, 9.0]);
        let mut tape = Tape::new();
        let w = tape.constant(t.clone()).unwrap();
        let h = entropy_term_tape(&mut tape, &[w]).unwrap();
        assert!((tape.value(h).item().unwrap() - entropy_term(&[&t])).abs() < 1e-12);
    }
}
