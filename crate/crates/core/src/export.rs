//! Deterministic binary networks obtained from a trained weight
//! distribution, their reference float forward pass, batch-norm
//! re-estimation and ensembles.

use alloc::vec;
use alloc::vec::Vec;

use crate::arch::{ModelSpec, NetMode, Plan, Stage, StageLinear};
use crate::error::{Error, Result};
use crate::linalg::{self, ConvShape, MatView, Real};
use crate::model::Model;
use crate::norm_pool::{BnBatchStats, BnParams, PoolGeometry};
use crate::rng::RngStream;
use crate::stochastic::{map_weights, sample_weights};
use crate::tape::log_softmax_row;
use crate::tensor::Tensor;
use crate::train::argmax_rows;

/// One hidden stage of a deterministic network.
#[derive(Clone, Debug, PartialEq)]
pub struct DetStage {
    /// `±1` weights, shaped like the distribution they came from.
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BnParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicBinaryNet {
    spec: ModelSpec,
    plan: Plan,
    pub stages: Vec<DetStage>,
    pub softmax_weight: Tensor,
    pub softmax_bias: Tensor,
    /// Whether the batch-norm statistics were re-estimated for these
    /// weights.
    pub bn_reestimated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportMode {
    /// Most likely weights.
    Map,
    /// One draw from the weight distribution.
    Sample,
}

/// Instantiates a deterministic network. Batch-norm statistics are copied
/// from the running estimates of the model.
pub fn export(model: &Model, mode: ExportMode, rng: &mut RngStream) -> Result<DeterministicBinaryNet> {
    if model.mode() != NetMode::Binary {
        return Err(Error::InvalidArgument("only binary models can be exported".into()));
    }
    let mut stages = Vec::with_capacity(model.hidden.len());
    for i in 0..model.hidden.len() {
        let dist = model.weight_distribution(i)?;
        let weights = match mode {
            ExportMode::Map => map_weights(&dist),
            ExportMode::Sample => sample_weights(&dist, rng),
        };
        stages.push(DetStage {
            weights,
            bias: model.hidden[i].bias.clone(),
            bn: model.hidden[i].bn.clone(),
        });
    }
    DeterministicBinaryNet::new(model.spec().clone(), stages, model.softmax_weight.clone(), model.softmax_bias.clone())
}

impl DeterministicBinaryNet {
    pub fn new(spec: ModelSpec, stages: Vec<DetStage>, softmax_weight: Tensor, softmax_bias: Tensor) -> Result<Self> {
        let spec = spec.with_mode(NetMode::Binary);
        let plan = spec.plan()?;
        if stages.len() != plan.stages.len() {
            return Err(Error::Architecture(alloc::format!("{} stages for {} layers", stages.len(), plan.stages.len())));
        }
        for (st, d) in plan.stages.iter().zip(&stages) {
            if d.weights.shape() != st.weight_shape().as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "deterministic net",
                    lhs: d.weights.shape().to_vec(),
                    rhs: st.weight_shape(),
                });
            }
            if let Some(i) = d.weights.data().iter().position(|&w| w != 1.0 && w != -1.0) {
                return Err(Error::Domain {
                    op: "deterministic net",
                    detail: alloc::format!("weight {} is not +-1", i),
                });
            }
            if d.bn.is_some() != spec.batch_norm || d.bias.is_some() != spec.bias {
                return Err(Error::Architecture("stage parameters do not match the architecture flags".into()));
            }
            if let Some(bn) = &d.bn {
                bn.validate()?;
                if bn.channels() != st.channels() {
                    return Err(Error::ShapeMismatch {
                        op: "deterministic net batch norm",
                        lhs: vec![bn.channels()],
                        rhs: vec![st.channels()],
                    });
                }
            }
        }
        if softmax_weight.shape() != [plan.classes, plan.softmax_in] || softmax_bias.shape() != [plan.classes] {
            return Err(Error::ShapeMismatch {
                op: "deterministic net softmax",
                lhs: softmax_weight.shape().to_vec(),
                rhs: vec![plan.classes, plan.softmax_in],
            });
        }
        Ok(Self {
            spec,
            plan,
            stages,
            softmax_weight,
            softmax_bias,
            bn_reestimated: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn classes(&self) -> usize {
        self.plan.classes
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<usize> {
        let want = self.spec.input;
        let s = x.shape();
        if s.len() != 4 || s[1..] != want {
            return Err(Error::ShapeMismatch {
                op: "deterministic forward",
                lhs: s.to_vec(),
                rhs: vec![0, want[0], want[1], want[2]],
            });
        }
        Ok(s[0])
    }
}

/// `(x - mean) * scale + beta`, the batch-norm expression used by every
/// deterministic engine, with `scale = gamma / sqrt(var + eps)`.
#[inline]
pub fn bn_affine<T: Real>(x: T, mean: T, scale: T, beta: T) -> T {
    (x - mean) * scale + beta
}

/// Per-channel `(mean, scale, beta)` of an eval-mode batch norm.
pub fn bn_coefficients(bn: &BnParams) -> Vec<(f64, f64, f64)> {
    (0..bn.channels())
        .map(|c| {
            let scale = bn.gamma.data()[c] / libm::sqrt(bn.running_var.data()[c] + bn.eps);
            (bn.running_mean.data()[c], scale, bn.beta.data()[c])
        })
        .collect()
}

/// Linear map plus optional bias of one stage on `n` images.
pub(crate) fn stage_linear<T: Real>(stage: &Stage, det: &DetStage, x: &[T], n: usize) -> Vec<T> {
    let w: Vec<T> = det.weights.data().iter().map(|&v| T::from_f64(v)).collect();
    let mut out = match stage.linear {
        StageLinear::Conv { geom, .. } => {
            let [c, h, wd] = stage.in_shape;
            let s = ConvShape::resolve(&[n, c, h, wd], det.weights.shape(), geom).expect("shapes planned");
            linalg::conv2d_raw(x, &w, &s)
        }
        StageLinear::Dense { in_features, out_features } => {
            let mut out = vec![T::zero(); n * out_features];
            linalg::gemm(
                T::one(),
                x,
                MatView::row_major(n, in_features),
                &w,
                MatView::transposed(out_features, in_features),
                T::zero(),
                &mut out,
                MatView::row_major(n, out_features),
            );
            out
        }
    };
    if let Some(b) = &det.bias {
        let [c, h, wd] = stage.linear_shape;
        let plane = h * wd;
        for (k, v) in out.iter_mut().enumerate() {
            *v = *v + T::from_f64(b.data()[(k / plane) % c]);
        }
    }
    out
}

/// Per-channel mean and unbiased variance of `[n, C, H, W]` values.
pub(crate) fn batch_stats<T: Real>(x: &[T], n: usize, shape: [usize; 3]) -> Result<BnBatchStats> {
    let [c, h, w] = shape;
    let plane = h * w;
    let m = n * plane;
    if m < 2 {
        return Err(Error::InvalidArgument("batch statistics need at least 2 activations per channel".into()));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals = (0..n).flat_map(|i| x[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().map(|&v| Real::to_f64(v)));
        let mu = vals.clone().sum::<f64>() / m as f64;
        let ss: f64 = vals.map(|v| (v - mu) * (v - mu)).sum();
        mean[ch] = mu;
        var[ch] = ss / (m - 1) as f64;
    }
    Ok(BnBatchStats { mean, var })
}

pub(crate) fn apply_bn<T: Real>(x: &mut [T], shape: [usize; 3], coef: &[(f64, f64, f64)]) {
    let [c, h, w] = shape;
    let plane = h * w;
    let coef: Vec<(T, T, T)> = coef.iter().map(|&(m, s, b)| (T::from_f64(m), T::from_f64(s), T::from_f64(b))).collect();
    for (k, v) in x.iter_mut().enumerate() {
        let (m, s, b) = coef[(k / plane) % c];
        *v = bn_affine(*v, m, s, b);
    }
}

/// Max pooling of `[n, C, H, W]` values.
pub(crate) fn max_pool<T: Real>(x: &[T], n: usize, shape: [usize; 3], geom: PoolGeometry) -> Vec<T> {
    let [c, h, w] = shape;
    let (oh, ow) = geom.output_hw(h, w).expect("planned");
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[base + oy * geom.stride * w + ox * geom.stride];
                for dy in 0..geom.window {
                    for dx in 0..geom.window {
                        let v = x[base + (oy * geom.stride + dy) * w + ox * geom.stride + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// `+1` for `a >= 0`, `-1` otherwise.
#[inline]
pub fn b_det<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Pre-batch-norm linear outputs of every stage, recorded by
/// [`det_forward_traced`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetTrace {
    pub linear: Vec<Tensor>,
}

/// One stage, from its input to binarized outputs.
pub(crate) fn stage_forward<T: Real>(net: &DeterministicBinaryNet, i: usize, x: &[T], n: usize, norm: &mut Option<&mut Vec<Option<BnBatchStats>>>, trace: Option<&mut DetTrace>) -> Result<Vec<T>> {
    let stage = &net.plan.stages[i];
    let det = &net.stages[i];
    let mut a = stage_linear(stage, det, x, n);
    if let Some(tr) = trace {
        let [c, h, w] = stage.linear_shape;
        tr.linear.push(Tensor::new(vec![n, c, h, w], a.iter().map(|&v| Real::to_f64(v)).collect())?);
    }
    if let Some(bn) = &det.bn {
        let coef = match norm {
            None => bn_coefficients(bn),
            Some(stats) => {
                let st = batch_stats(&a, n, stage.linear_shape)?;
                let coef = (0..bn.channels())
                    .map(|c| (st.mean[c], bn.gamma.data()[c] / libm::sqrt(st.var[c] + bn.eps), bn.beta.data()[c]))
                    .collect::<Vec<_>>();
                stats.push(Some(st));
                coef
            }
        };
        apply_bn(&mut a, stage.linear_shape, &coef);
    } else if let Some(stats) = norm {
        stats.push(None);
    }
    if let Some(pool) = stage.pool {
        a = max_pool(&a, n, stage.linear_shape, pool);
    }
    for v in a.iter_mut() {
        *v = b_det(*v);
    }
    Ok(a)
}

/// Real softmax layer on `[n, features]` activations.
pub(crate) fn softmax_layer<T: Real>(net: &DeterministicBinaryNet, h: &[T], n: usize) -> Result<Tensor> {
    let (classes, feats) = (net.plan.classes, net.plan.softmax_in);
    let w: Vec<T> = net.softmax_weight.data().iter().map(|&v| T::from_f64(v)).collect();
    let mut out = vec![T::zero(); n * classes];
    linalg::gemm(
        T::one(),
        h,
        MatView::row_major(n, feats),
        &w,
        MatView::transposed(classes, feats),
        T::zero(),
        &mut out,
        MatView::row_major(n, classes),
    );
    let data = out
        .iter()
        .enumerate()
        .map(|(k, v)| Real::to_f64(*v + T::from_f64(net.softmax_bias.data()[k % classes])))
        .collect();
    Tensor::new(vec![n, classes], data)
}

/// With `batch_stats` set, batch norm uses the statistics of `x` itself and
/// reports them; otherwise the stored statistics.
fn forward_generic<T: Real>(net: &DeterministicBinaryNet, x: &Tensor, mut batch_stats: Option<&mut Vec<Option<BnBatchStats>>>, mut trace: Option<&mut DetTrace>) -> Result<Tensor> {
    let n = net.check_input(x)?;
    let mut h: Vec<T> = x.data().iter().map(|&v| T::from_f64(v)).collect();
    for i in 0..net.stages.len() {
        h = stage_forward(net, i, &h, n, &mut batch_stats, trace.as_deref_mut())?;
    }
    softmax_layer(net, &h, n)
}

/// Reference float forward pass: `±1` linear maps, batch norm with the
/// stored statistics, max pooling, sign binarization, real softmax layer.
pub fn det_forward(net: &DeterministicBinaryNet, x: &Tensor) -> Result<Tensor> {
    forward_generic::<f64>(net, x, None, None)
}

/// [`det_forward`] evaluated in single precision.
pub fn det_forward_f32(net: &DeterministicBinaryNet, x: &Tensor) -> Result<Tensor> {
    forward_generic::<f32>(net, x, None, None)
}

/// [`det_forward`] that also returns the linear outputs of every stage.
pub fn det_forward_traced(net: &DeterministicBinaryNet, x: &Tensor) -> Result<(Tensor, DetTrace)> {
    let mut trace = DetTrace::default();
    let logits = forward_generic::<f64>(net, x, None, Some(&mut trace))?;
    Ok((logits, trace))
}

/// Replaces the batch-norm statistics of `net` with estimates from the
/// given training batches. Each batch is propagated with its own batch
/// statistics. With `momentum = Some(m)` the stored statistics are updated
/// as `(1 - m) * old + m * batch`; with `None` they are replaced by the
/// plain average over all batches.
pub fn reestimate_bn(net: &mut DeterministicBinaryNet, batches: &[Tensor], momentum: Option<f64>) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("batch-norm re-estimation needs at least one batch".into()));
    }
    if let Some(m) = momentum {
        if !(m > 0.0 && m <= 1.0) {
            return Err(Error::InvalidArgument(alloc::format!("momentum must lie in (0, 1], got {}", m)));
        }
    }
    let s = net.stages.len();
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; s];
    let mut running: Vec<Option<BnParams>> = net.stages.iter().map(|d| d.bn.clone()).collect();
    for x in batches {
        let mut stats = Vec::with_capacity(s);
        forward_generic::<f64>(net, x, Some(&mut stats), None)?;
        for (i, st) in stats.into_iter().enumerate() {
            let Some(st) = st else { continue };
            match momentum {
                Some(m) => {
                    let bn = running[i].as_mut().expect("stats only for batch-norm stages");
                    bn.momentum = m;
                    bn.update_running(&st);
                }
                None => {
                    let acc = sums[i].get_or_insert_with(|| (vec![0.0; st.mean.len()], vec![0.0; st.var.len()]));
                    for (a, b) in acc.0.iter_mut().zip(&st.mean) {
                        *a += b;
                    }
                    for (a, b) in acc.1.iter_mut().zip(&st.var) {
                        *a += b;
                    }
                }
            }
        }
    }
    for (i, d) in net.stages.iter_mut().enumerate() {
        let Some(bn) = d.bn.as_mut() else { continue };
        match momentum {
            Some(_) => {
                let r = running[i].take().expect("present");
                bn.running_mean = r.running_mean;
                bn.running_var = r.running_var;
            }
            None => {
                let (m, v) = sums[i].take().expect("every batch-norm stage reports statistics");
                let k = batches.len() as f64;
                bn.running_mean = Tensor::from_vec(m.into_iter().map(|x| x / k).collect());
                bn.running_var = Tensor::from_vec(v.into_iter().map(|x| x / k).collect());
            }
        }
    }
    net.bn_reestimated = true;
    Ok(())
}

/// Log-softmax of every row of `[n, classes]` logits.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let cols = logits.shape()[1];
    let data = logits.data().chunks(cols).flat_map(log_softmax_row).collect();
    Tensor::new(logits.shape().to_vec(), data).expect("shape preserved")
}

/// Class with the largest summed log-softmax per row; ties go to the lowest
/// class index.
pub fn combine_log_softmax(members: &[Tensor]) -> Result<Vec<usize>> {
    let first = members.first().ok_or(Error::EmptyReduction("ensemble members"))?;
    let mut sum = first.clone();
    for m in &members[1..] {
        sum = sum.zip_map(m, "ensemble sum", |a, b| a + b)?;
    }
    Ok(argmax_rows(&sum))
}

/// Networks sampled from one weight distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<DeterministicBinaryNet>,
}

impl Ensemble {
    pub fn new(members: Vec<DeterministicBinaryNet>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyReduction("ensemble members"))?;
        for m in &members[1..] {
            if m.spec() != first.spec() || m.softmax_weight != first.softmax_weight || m.softmax_bias != first.softmax_bias {
                return Err(Error::Architecture("ensemble members must share the architecture and softmax layer".into()));
            }
        }
        Ok(Self { members })
    }

    /// `size` independent weight samples.
    pub fn sample(model: &Model, size: usize, rng: &mut RngStream) -> Result<Self> {
        let members = (0..size).map(|_| export(model, ExportMode::Sample, rng)).collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Ensemble class predictions and the log-softmax output of every member.
pub fn ensemble_predict(e: &Ensemble, x: &Tensor) -> Result<(Vec<usize>, Vec<Tensor>)> {
    let outs = e
        .members
        .iter()
        .map(|m| det_forward(m, x).map(|l| log_softmax(&l)))
        .collect::<Result<Vec<_>>>()?;
    Ok((combine_log_softmax(&outs)?, outs))
}
