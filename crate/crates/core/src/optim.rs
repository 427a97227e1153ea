//! Adam and a reduce-on-plateau learning-rate schedule.

use alloc::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math;
use crate::model::Model;
use crate::tape::{GradientMap, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!("learning rate must be positive, got {}", lr)));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(&id)
    }

    /// One Adam update of every model parameter that has a gradient.
    pub fn apply(&mut self, model: &mut Model, grads: &GradientMap) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (&id, g) in grads.iter() {
            let p = model
                .param_mut(id)
                .ok_or_else(|| Error::InvalidArgument(alloc::format!("gradient for unknown parameter {:?}", id)))?;
            p.expect_same_shape(g, "adam")?;
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / (math::sqrt(*vi / c2) + eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the validation loss has
/// failed to improve by more than `min_delta` for `patience` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 10,
            min_delta: 1e-4,
            min_lr: 1e-5,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

impl PlateauScheduler {
    /// Records one validation loss and returns the (possibly reduced)
    /// learning rate.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.bad_epochs = 0;
            return lr.max(self.min_lr);
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr.max(self.min_lr)
    }
}
