//! Trainable networks: binary weight distributions (or real weights for
//! full-precision pretraining), batch norm parameters and the real-valued
//! softmax layer, with the forward pass recorded on a [`Tape`].

use alloc::vec::Vec;

use crate::arch::{ModelSpec, NetMode, Plan, Stage, StageLinear};
use crate::error::{Error, Result};
use crate::norm_pool::{self, BnBatchStats, BnMode, BnParams};
use crate::rng::RngStream;
use crate::stochastic::{self, BinaryWeightDistribution, GaussianVars, LinearKind};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Parameters of one hidden stage. In binary mode `weight` holds the logits
/// `W`; in full-precision mode it holds real weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BnParams>,
}

/// Which tensor a [`ParamId`] refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    Weight(usize),
    Bias(usize),
    Gamma(usize),
    Beta(usize),
    SoftmaxWeight,
    SoftmaxBias,
}

impl ParamSlot {
    pub fn id(self, stages: usize) -> ParamId {
        let raw = match self {
            ParamSlot::Weight(i) => 4 * i,
            ParamSlot::Bias(i) => 4 * i + 1,
            ParamSlot::Gamma(i) => 4 * i + 2,
            ParamSlot::Beta(i) => 4 * i + 3,
            ParamSlot::SoftmaxWeight => 4 * stages,
            ParamSlot::SoftmaxBias => 4 * stages + 1,
        };
        ParamId(raw as u32)
    }

    pub fn from_id(id: ParamId, stages: usize) -> Option<Self> {
        let raw = id.0 as usize;
        let (i, k) = (raw / 4, raw % 4);
        if i < stages {
            Some(match k {
                0 => ParamSlot::Weight(i),
                1 => ParamSlot::Bias(i),
                2 => ParamSlot::Gamma(i),
                _ => ParamSlot::Beta(i),
            })
        } else if raw == 4 * stages {
            Some(ParamSlot::SoftmaxWeight)
        } else if raw == 4 * stages + 1 {
            Some(ParamSlot::SoftmaxBias)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    plan: Plan,
    pub hidden: Vec<HiddenLayer>,
    /// `[classes, features]`.
    pub softmax_weight: Tensor,
    pub softmax_bias: Tensor,
}

/// Handles produced by one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Per hidden stage: the weight parameter (logits in binary mode).
    pub weights: Vec<Var>,
    pub softmax_weight: Var,
    pub softmax_bias: Var,
    /// Per hidden stage: batch statistics when batch norm ran in train mode.
    pub bn_stats: Vec<Option<BnBatchStats>>,
}

pub(crate) fn linear_kind(stage: &Stage) -> LinearKind {
    match stage.linear {
        StageLinear::Conv { geom, .. } => LinearKind::Conv2d(geom),
        StageLinear::Dense { .. } => LinearKind::Dense,
    }
}

impl Model {
    /// A model with zero weights, unit batch norm and no bias values.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let plan = spec.plan()?;
        let hidden = plan
            .stages
            .iter()
            .map(|st| HiddenLayer {
                weight: Tensor::zeros(&st.weight_shape()),
                bias: spec.bias.then(|| Tensor::zeros(&[st.channels()])),
                bn: spec.batch_norm.then(|| BnParams::new(st.channels())),
            })
            .collect();
        Ok(Self {
            softmax_weight: Tensor::zeros(&[plan.classes, plan.softmax_in]),
            softmax_bias: Tensor::zeros(&[plan.classes]),
            spec,
            plan,
            hidden,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn mode(&self) -> NetMode {
        self.spec.mode
    }

    pub fn weight_distribution(&self, stage: usize) -> Result<BinaryWeightDistribution> {
        if self.spec.mode != NetMode::Binary {
            return Err(Error::InvalidArgument("full-precision model has no weight distributions".into()));
        }
        BinaryWeightDistribution::new(self.hidden[stage].weight.clone())
    }

    /// Every trainable parameter with its identifier.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let s = self.hidden.len();
        let mut out = Vec::new();
        for (i, h) in self.hidden.iter().enumerate() {
            out.push((ParamSlot::Weight(i).id(s), &h.weight));
            if let Some(b) = &h.bias {
                out.push((ParamSlot::Bias(i).id(s), b));
            }
            if let Some(bn) = &h.bn {
                out.push((ParamSlot::Gamma(i).id(s), &bn.gamma));
                out.push((ParamSlot::Beta(i).id(s), &bn.beta));
            }
        }
        out.push((ParamSlot::SoftmaxWeight.id(s), &self.softmax_weight));
        out.push((ParamSlot::SoftmaxBias.id(s), &self.softmax_bias));
        out
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match ParamSlot::from_id(id, self.hidden.len())? {
            ParamSlot::Weight(i) => Some(&mut self.hidden[i].weight),
            ParamSlot::Bias(i) => self.hidden[i].bias.as_mut(),
            ParamSlot::Gamma(i) => self.hidden[i].bn.as_mut().map(|b| &mut b.gamma),
            ParamSlot::Beta(i) => self.hidden[i].bn.as_mut().map(|b| &mut b.beta),
            ParamSlot::SoftmaxWeight => Some(&mut self.softmax_weight),
            ParamSlot::SoftmaxBias => Some(&mut self.softmax_bias),
        }
    }

    /// Folds the batch statistics of a train-mode forward pass into the
    /// running estimates.
    pub fn update_running(&mut self, stats: &[Option<BnBatchStats>]) {
        for (h, s) in self.hidden.iter_mut().zip(stats) {
            if let (Some(bn), Some(s)) = (h.bn.as_mut(), s) {
                bn.update_running(s);
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.spec.input;
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != want || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: alloc::vec![0, want[0], want[1], want[2]],
            });
        }
        Ok(())
    }

    /// Records one forward pass of a batch `x: [N, C, H, W]`.
    ///
    /// In binary mode each stage propagates Gaussian pre-activations,
    /// applies stochastic batch norm and pooling, binarizes and draws one
    /// Binary Concrete sample per activation at temperature `tau`. Noise is
    /// drawn from `rng` stage by stage, pooling noise before Concrete noise.
    /// In full-precision mode stages are linear, batch norm, max pooling and
    /// `tanh`, and `rng` is not used.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, bn_mode: BnMode, tau: f64, rng: &mut RngStream) -> Result<Forward> {
        self.check_input(x)?;
        let s = self.hidden.len();
        let n = x.shape()[0];
        let mut h = tape.constant(x.clone())?;
        let mut weights = Vec::with_capacity(s);
        let mut bn_stats = Vec::with_capacity(s);
        for (i, (stage, layer)) in self.plan.stages.iter().zip(&self.hidden).enumerate() {
            if !stage.is_conv() && tape.shape(h).len() != 2 {
                h = tape.reshape(h, &[n, stage.in_shape[0]])?;
            }
            let kind = linear_kind(stage);
            let w = tape.param(ParamSlot::Weight(i).id(s), layer.weight.clone())?;
            weights.push(w);
            let bias = match &layer.bias {
                Some(b) => Some(tape.param(ParamSlot::Bias(i).id(s), b.clone())?),
                None => None,
            };
            let bn_vars = match &layer.bn {
                Some(bn) => Some((
                    bn,
                    tape.param(ParamSlot::Gamma(i).id(s), bn.gamma.clone())?,
                    tape.param(ParamSlot::Beta(i).id(s), bn.beta.clone())?,
                )),
                None => None,
            };
            match self.spec.mode {
                NetMode::Binary => {
                    let (wm, wv) = stochastic::weight_moments_tape(tape, w)?;
                    let mut g = stochastic::clt_forward_tape(tape, h, wm, wv, kind, bias)?;
                    let mut stats = None;
                    if let Some((bn, gamma, beta)) = bn_vars {
                        let (m, v, st) = norm_pool::batchnorm_tape(tape, g.mean, Some(g.var), gamma, beta, bn, bn_mode)?;
                        g = GaussianVars { mean: m, var: v.expect("variance propagated") };
                        stats = st;
                    }
                    if let Some(pool) = stage.pool {
                        g = norm_pool::stoch_maxpool_tape(tape, g, pool, rng)?.0;
                    }
                    let q = stochastic::binarize_tape(tape, g)?;
                    h = stochastic::concrete_sample_tape(tape, q, tau, rng)?;
                    bn_stats.push(stats);
                }
                NetMode::FullPrecision => {
                    let mut a = stochastic::apply_linear_tape(tape, h, w, kind)?;
                    if let Some(b) = bias {
                        a = tape.channel_affine(a, None, Some(b))?;
                    }
                    let mut stats = None;
                    if let Some((bn, gamma, beta)) = bn_vars {
                        let (m, _, st) = norm_pool::batchnorm_tape(tape, a, None, gamma, beta, bn, bn_mode)?;
                        a = m;
                        stats = st;
                    }
                    if let Some(pool) = stage.pool {
                        a = norm_pool::maxpool_tape(tape, a, pool)?;
                    }
                    h = tape.tanh(a)?;
                    bn_stats.push(stats);
                }
            }
        }
        if tape.shape(h).len() != 2 {
            h = tape.reshape(h, &[n, self.plan.softmax_in])?;
        }
        let sw = tape.param(ParamSlot::SoftmaxWeight.id(s), self.softmax_weight.clone())?;
        let sb = tape.param(ParamSlot::SoftmaxBias.id(s), self.softmax_bias.clone())?;
        let z = tape.matmul_t(h, sw)?;
        let logits = tape.channel_affine(z, None, Some(sb))?;
        Ok(Forward {
            logits,
            weights,
            softmax_weight: sw,
            softmax_bias: sb,
            bn_stats,
        })
    }

    /// Logits of a forward pass without keeping the tape.
    pub fn predict(&self, x: &Tensor, bn_mode: BnMode, tau: f64, rng: &mut RngStream) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, bn_mode, tau, rng)?;
        Ok(tape.value(f.logits).clone())
    }
}
