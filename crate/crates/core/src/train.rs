//! Training loop, initialization schemes and weight transfer.

use alloc::vec::Vec;

use crate::arch::{ModelSpec, NetMode};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::math;
use crate::model::Model;
use crate::norm_pool::BnMode;
use crate::objective::{self, LossParts, ObjectiveConfig};
use crate::optim::{Adam, PlateauScheduler};
use crate::rng::RngStream;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Transferred probabilities are clipped to `[P_CLIP, 1 - P_CLIP]`.
pub const P_CLIP: f64 = 0.05;

/// Stream numbers of the generators derived from a run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const EXPORT: u64 = 5;
    pub const REESTIMATE: u64 = 6;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub objective: ObjectiveConfig,
    pub scheduler: PlateauScheduler,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr: 1e-2,
            objective: ObjectiveConfig::default(),
            scheduler: PlateauScheduler::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One stochastic forward pass, loss, backward pass and Adam update on a
/// batch. Batch-norm running statistics are updated as a side effect.
pub fn train_step(model: &mut Model, x: &Tensor, y: &[usize], cfg: &ObjectiveConfig, opt: &mut Adam, rng: &mut RngStream) -> Result<(LossParts, usize)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, x, BnMode::Train, cfg.tau, rng)?;
    let (loss, parts) = objective::build_loss(&mut tape, &fwd, y, model.mode(), cfg)?;
    let correct = count_correct(tape.value(fwd.logits), y);
    let grads = tape.backward(loss)?;
    opt.apply(model, &grads)?;
    model.update_running(&fwd.bn_stats);
    Ok((parts, correct))
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn count_correct(logits: &Tensor, y: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(y).filter(|(p, t)| p == t).count()
}

/// Mean cross-entropy and accuracy of a model with running batch-norm
/// statistics. Binary models draw their noise from `rng`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize, tau: f64, rng: &mut RngStream) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyReduction("evaluation set"));
    }
    let mut nll = 0.0;
    let mut correct = 0;
    for (x, y) in data.sequential_batches(batch_size) {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &x, BnMode::Eval, tau, rng)?;
        let l = tape.log_softmax_nll(f.logits, &y)?;
        nll += tape.value(l).item()? * y.len() as f64;
        correct += count_correct(tape.value(f.logits), &y);
    }
    Ok((nll / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Per-image augmentation applied to training batches.
pub trait Augment {
    fn apply(&self, image: &mut [f64], shape: [usize; 3], rng: &mut RngStream);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 when no epoch ran).
    pub best_epoch: usize,
}

/// Trains for `cfg.epochs` epochs with shuffled mini-batches, evaluates on
/// `val` after every epoch to drive the plateau schedule, and finally
/// restores the parameters of the epoch with the lowest validation loss.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    augment: Option<&dyn Augment>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::InvalidArgument("training set needs at least 2 images".into()));
    }
    let mut opt = Adam::new(cfg.lr)?;
    let mut sched = cfg.scheduler.clone();
    let mut shuffle = RngStream::substream(cfg.seed, streams::SHUFFLE);
    let mut noise = RngStream::substream(cfg.seed, streams::NOISE);
    let mut aug_rng = RngStream::substream(cfg.seed, streams::AUGMENT);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // A trailing batch of one image has no batch statistics.
            if chunk.len() < 2 {
                continue;
            }
            let (mut x, y) = train.batch(chunk);
            if let Some(a) = augment {
                let shape = train.shape();
                let n = train.image_len();
                for img in x.data_mut().chunks_mut(n) {
                    a.apply(img, shape, &mut aug_rng);
                }
            }
            let (parts, c) = train_step(model, &x, &y, &cfg.objective, &mut opt, &mut noise)?;
            loss_sum += parts.total * y.len() as f64;
            correct += c;
            seen += y.len();
        }
        let mut rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss: None,
            val_accuracy: None,
            lr: opt.lr,
        };
        if let Some(val) = val {
            let mut eval_rng = RngStream::substream(cfg.seed, streams::EVAL);
            let (vl, va) = evaluate(model, val, cfg.batch_size.max(256), cfg.objective.tau, &mut eval_rng)?;
            rec.val_loss = Some(vl);
            rec.val_accuracy = Some(va);
            if best.as_ref().map_or(true, |(b, _, _)| vl < *b) {
                best = Some((vl, epoch, model.clone()));
            }
            opt.lr = sched.observe(vl, opt.lr);
        }
        on_epoch(&rec);
        records.push(rec);
    }
    let best_epoch = match best {
        Some((_, e, m)) => {
            *model = m;
            e
        }
        None => records.len(),
    };
    Ok(TrainReport { records, best_epoch })
}

/// Uniform `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    math::sqrt(6.0 / (fan_in + fan_out) as f64)
}

fn xavier_tensor(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    let a = xavier_bound(fan_in, fan_out);
    Tensor::from_fn(shape, |_| (2.0 * rng.uniform() - 1.0) * a)
}

/// Xavier-uniform initialization of every weight tensor. In binary mode the
/// draws are used directly as logits. Biases start at zero and batch norm
/// at the identity.
pub fn xavier_init(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let mut model = Model::zeros(spec.clone())?;
    let mut rng = RngStream::substream(seed, streams::INIT);
    let stages = model.plan().stages.clone();
    for (layer, st) in model.hidden.iter_mut().zip(&stages) {
        layer.weight = xavier_tensor(&st.weight_shape(), st.fan_in(), st.fan_out(), &mut rng);
    }
    let (classes, feats) = (model.plan().classes, model.plan().softmax_in);
    model.softmax_weight = xavier_tensor(&[classes, feats], feats, classes, &mut rng);
    Ok(model)
}

/// Logits of a binary weight distribution whose mean matches `w / std(w)`
/// with the probability of `-1` clipped to `[0.05, 0.95]`.
pub fn transfer_logits(w: &Tensor) -> Result<Tensor> {
    let n = w.len() as f64;
    if w.is_empty() {
        return Err(Error::InvalidArgument("cannot transfer an empty layer".into()));
    }
    let mean = w.sum() / n;
    let var = w.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = math::sqrt(var);
    if w.data().iter().all(|&v| v == w.data()[0]) || !(sd > 0.0) {
        return Err(Error::InvalidArgument("cannot transfer a layer whose weights have zero variance".into()));
    }
    Ok(w.map(|v| {
        let p = ((1.0 - v / sd) / 2.0).clamp(P_CLIP, 1.0 - P_CLIP);
        math::ln(p / (1.0 - p))
    }))
}

/// Binary model initialized from a trained full-precision model of the same
/// topology. Binary layers get transferred distributions; batch norm, biases
/// and the softmax layer are copied.
pub fn transfer_init(fp: &Model) -> Result<Model> {
    if fp.mode() != NetMode::FullPrecision {
        return Err(Error::InvalidArgument("transfer source must be a full-precision model".into()));
    }
    let spec = fp.spec().clone().with_mode(NetMode::Binary);
    let mut model = Model::zeros(spec)?;
    model.hidden = fp.hidden.clone();
    model.softmax_weight = fp.softmax_weight.clone();
    model.softmax_bias = fp.softmax_bias.clone();
    for layer in model.hidden.iter_mut() {
        layer.weight = transfer_logits(&layer.weight)?;
    }
    Ok(model)
}

/// Trains a full-precision network of the given topology from a Xavier
/// initialization. Zero epochs return the initialization.
pub fn fp_pretrain(spec: &ModelSpec, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<(Model, TrainReport)> {
    let spec = spec.clone().with_mode(NetMode::FullPrecision);
    let mut model = xavier_init(&spec, cfg.seed)?;
    let report = fit(&mut model, train, val, cfg, None, on_epoch)?;
    Ok((model, report))
}
