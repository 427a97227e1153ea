//! Experiment drivers shared by the CLI and the acceptance suite.

use std::path::{Path, PathBuf};

use blrnet_core::arch::NetMode;
use blrnet_core::dataset::Dataset;
use blrnet_core::export::{self, det_forward, det_forward_f32, log_softmax, DeterministicBinaryNet, ExportMode};
use blrnet_core::metrics::{self, CoverageCurve};
use blrnet_core::model::Model;
use blrnet_core::tape::log_softmax_row;
use blrnet_core::train::{self, streams, Augment, EpochRecord, TrainReport};
use blrnet_core::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DatasetName, InitScheme, RunConfig};
use crate::data::augment::ShiftFlip;
use crate::data::{self, cifar, mnist, Splits};
use crate::error::{Error, Result};

pub const MNIST_SUBDIR: &str = "mnist";
pub const CIFAR_SUBDIR: &str = "cifar-10-batches-bin";

/// Inference batch size for deterministic nets.
const EVAL_BATCH: usize = 500;

/// Splits for binary training, with the first `train_size` training images.
pub fn load_data(cfg: &RunConfig) -> Result<Splits> {
    load_splits(cfg, cfg.train_size)
}

/// Splits for full-precision pretraining, with the first `pretrain_size`
/// training images.
pub fn load_pretrain_data(cfg: &RunConfig) -> Result<Splits> {
    load_splits(cfg, cfg.pretrain_size)
}

fn load_splits(cfg: &RunConfig, train_size: Option<usize>) -> Result<Splits> {
    let root = data::resolve_data_dir(cfg.data_dir.as_deref());
    let mut splits = match cfg.dataset {
        DatasetName::Mnist => mnist::load(&root.join(MNIST_SUBDIR), train_size)?,
        DatasetName::Cifar10 => cifar::load(&root.join(CIFAR_SUBDIR), cfg.zca.then_some(cfg.zca_eps), train_size)?,
    };
    if let Some(n) = cfg.test_size {
        if n > splits.test.len() {
            return Err(Error::Config(format!("test_size {} exceeds the {} test images", n, splits.test.len())));
        }
        splits.test = splits.test.slice(0, n)?;
    }
    Ok(splits)
}

fn augmenter(cfg: &RunConfig) -> Option<ShiftFlip> {
    cfg.augment.then(ShiftFlip::default)
}

/// Full-precision training from a Xavier initialization.
pub fn pretrain(cfg: &RunConfig, splits: &Splits, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<(Model, TrainReport)> {
    let tc = cfg.pretrain_config(splits.train.len());
    let spec = cfg.model_spec()?.with_mode(NetMode::FullPrecision);
    let mut model = train::xavier_init(&spec, cfg.seed)?;
    let aug = augmenter(cfg);
    let report = train::fit(&mut model, &splits.train, Some(&splits.val), &tc, aug.as_ref().map(|a| a as &dyn Augment), on_epoch)?;
    Ok((model, report))
}

/// The binary model training starts from.
pub fn initial_binary(cfg: &RunConfig, pretrained: Option<&Model>) -> Result<Model> {
    match cfg.init {
        InitScheme::Xavier => Ok(train::xavier_init(&cfg.model_spec()?, cfg.seed)?),
        InitScheme::Transfer => {
            let fp = pretrained.ok_or_else(|| Error::Config("transfer initialization needs a pretrained full-precision model".into()))?;
            if fp.spec().clone().with_mode(NetMode::Binary) != cfg.model_spec()? {
                return Err(Error::Config("pretrained model does not match the configured architecture".into()));
            }
            Ok(train::transfer_init(fp)?)
        }
    }
}

pub fn train_binary(cfg: &RunConfig, splits: &Splits, mut model: Model, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<(Model, TrainReport)> {
    let tc = cfg.binary_train_config(splits.train.len());
    let aug = augmenter(cfg);
    let report = train::fit(&mut model, &splits.train, Some(&splits.val), &tc, aug.as_ref().map(|a| a as &dyn Augment), on_epoch)?;
    Ok((model, report))
}

/// `count` random training batches for batch-norm re-estimation. The same
/// seed always yields the same batches.
pub fn reestimation_batches(ds: &Dataset, batch_size: usize, count: usize, seed: u64) -> Vec<Tensor> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    RngStream::substream(seed, streams::REESTIMATE).shuffle(&mut order);
    order.chunks(batch_size).filter(|c| c.len() > 1).take(count).map(|c| ds.batch(c).0).collect()
}

/// Logits of a deterministic net on a whole dataset.
pub fn net_logits(net: &DeterministicBinaryNet, ds: &Dataset, f32_inference: bool) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ds.len() * net.classes());
    for (x, _) in ds.sequential_batches(EVAL_BATCH) {
        let l = match f32_inference {
            true => det_forward_f32(net, &x)?,
            false => det_forward(net, &x)?,
        };
        data.extend_from_slice(l.data());
    }
    Ok(Tensor::new(vec![ds.len(), net.classes()], data)?)
}

/// Mean negative log-likelihood and accuracy of logits against labels.
pub fn score(logits: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let cols = logits.shape()[1];
    let nll = logits
        .data()
        .chunks(cols)
        .zip(labels)
        .map(|(row, &y)| -log_softmax_row(row)[y])
        .sum::<f64>()
        / labels.len() as f64;
    let acc = metrics::accuracy(&train::argmax_rows(logits), labels)?;
    Ok((nll, acc))
}

/// A sampled net, with re-estimated batch norm when batches are given.
pub fn sample_net(model: &Model, rng: &mut RngStream, reestimate: Option<&[Tensor]>) -> Result<DeterministicBinaryNet> {
    let mut net = export::export(model, ExportMode::Sample, rng)?;
    if let Some(b) = reestimate {
        export::reestimate_bn(&mut net, b, None)?;
    }
    Ok(net)
}

/// Accuracy of the summed log-softmax prediction of member logits.
pub fn ensemble_accuracy(member_log_softmax: &[Tensor], labels: &[usize]) -> Result<f64> {
    Ok(metrics::accuracy(&export::combine_log_softmax(member_log_softmax)?, labels)?)
}

/// Error-coverage curve of an ensemble (negated variance statistic) or a
/// single net (max softmax) from member logits.
pub fn coverage_curve(member_logits: &[Tensor], labels: &[usize], steps: usize) -> Result<CoverageCurve> {
    let (pred, scores) = match member_logits {
        [] => return Err(Error::Config("coverage needs at least one net".into())),
        [single] => (train::argmax_rows(single), metrics::max_softmax(single)),
        many => {
            let ls: Vec<Tensor> = many.iter().map(log_softmax).collect();
            (export::combine_log_softmax(&ls)?, metrics::ensemble_certainty(&ls)?)
        }
    };
    let correct: Vec<bool> = pred.iter().zip(labels).map(|(p, y)| p == y).collect();
    Ok(metrics::error_coverage(&scores, &correct, &metrics::default_grid(steps))?)
}

/// Budgets of the desk-scale MNIST study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskPlan {
    pub cfg: RunConfig,
    /// Epochs given to every ablation variant.
    pub ablation_epochs: usize,
    /// Independent ensembles drawn for the ensemble comparison.
    pub ensemble_rounds: usize,
    pub ensemble_sizes: Vec<usize>,
    /// Sampled nets compared with and without re-estimation.
    pub reestimation_samples: usize,
    /// Test images used for the sampled-net studies.
    pub sample_eval_size: usize,
}

impl DeskPlan {
    /// The budgets checked by the acceptance suite: the MNIST architecture
    /// on a 10k-image subset after 5 pretraining epochs on 30k images, with
    /// 20 binary epochs.
    pub fn acceptance(data_dir: PathBuf) -> Self {
        Self::new(RunConfig {
            data_dir: Some(data_dir),
            ..RunConfig::default()
        })
    }

    pub fn new(cfg: RunConfig) -> Self {
        Self {
            cfg,
            ablation_epochs: 3,
            ensemble_rounds: 5,
            ensemble_sizes: vec![2, 5, 16],
            reestimation_samples: 10,
            sample_eval_size: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

impl From<&EpochRecord> for EpochRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            train_loss: r.train_loss,
            train_accuracy: r.train_accuracy,
            val_loss: r.val_loss.unwrap_or(f64::NAN),
            val_accuracy: r.val_accuracy.unwrap_or(f64::NAN),
            lr: r.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub size: usize,
    /// One accuracy per round.
    pub accuracies: Vec<f64>,
}

impl EnsembleRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub epochs: usize,
    /// Validation accuracy after `epochs` epochs.
    pub transfer_bn: f64,
    pub xavier_bn: f64,
    pub transfer_no_bn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskOutcome {
    pub plan: DeskPlan,
    pub pretrain_epochs: Vec<EpochRow>,
    pub binary_epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub pretrain_test_accuracy: f64,
    /// MAP accuracy with the training statistics in batch norm.
    pub map_raw_test_accuracy: f64,
    /// MAP accuracy after batch-norm re-estimation.
    pub map_test_accuracy: f64,
    /// Re-estimated MAP accuracy on the sampled-net evaluation subset.
    pub map_subset_accuracy: f64,
    pub ensembles: Vec<EnsembleRow>,
    /// `(without, with)` re-estimation accuracy per sampled net.
    pub reestimation: Vec<(f64, f64)>,
    /// Largest-ensemble curve of the first round.
    pub coverage: Vec<(f64, f64)>,
    pub ablation: Ablation,
}

impl DeskOutcome {
    pub fn ensemble(&self, size: usize) -> Option<&EnsembleRow> {
        self.ensembles.iter().find(|e| e.size == size)
    }

    pub fn coverage_error(&self, c: f64) -> Option<f64> {
        CoverageCurve { points: self.coverage.clone() }.error_at(c)
    }
}

/// Reuses checkpoints in `work` that were produced with the same
/// configuration, so an interrupted study resumes where it stopped.
struct Stash<'a> {
    work: Option<&'a Path>,
}

impl Stash<'_> {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.work.map(|w| w.join(name))
    }

    fn get(&self, name: &str, cfg: &RunConfig) -> Result<Option<(Model, Vec<EpochRow>, usize)>> {
        let Some(p) = self.path(name) else { return Ok(None) };
        if !p.exists() {
            return Ok(None);
        }
        let ck = checkpoint::load(&p)?;
        if ck.meta("config") != Some(stash_key(cfg).as_str()) {
            return Ok(None);
        }
        let rows: Vec<EpochRow> = match ck.meta("epochs") {
            Some(t) => toml::from_str::<EpochRows>(t).map_err(|e| Error::Config(e.to_string()))?.rows,
            None => Vec::new(),
        };
        let best = ck.meta("best_epoch").and_then(|b| b.parse().ok()).unwrap_or(0);
        Ok(Some((ck.to_model()?, rows, best)))
    }

    fn put(&self, name: &str, cfg: &RunConfig, model: &Model, rows: &[EpochRow], best: usize) -> Result<()> {
        let Some(p) = self.path(name) else { return Ok(()) };
        let rows = toml::to_string(&EpochRows { rows: rows.to_vec() }).map_err(|e| Error::Config(e.to_string()))?;
        let meta = vec![
            ("config".to_string(), stash_key(cfg)),
            ("epochs".to_string(), rows),
            ("best_epoch".to_string(), best.to_string()),
        ];
        checkpoint::save(&p, &Checkpoint::from_model(model, cfg.seed, meta))
    }
}

/// The configuration without the fields that do not affect results.
fn stash_key(cfg: &RunConfig) -> String {
    RunConfig {
        data_dir: None,
        out_dir: PathBuf::new(),
        ..cfg.clone()
    }
    .to_toml()
}

#[derive(Serialize, Deserialize)]
struct EpochRows {
    rows: Vec<EpochRow>,
}

fn stage(
    stash: &Stash,
    name: &str,
    cfg: &RunConfig,
    log: &mut dyn FnMut(&str),
    run: impl FnOnce(&mut dyn FnMut(&EpochRecord)) -> Result<(Model, TrainReport)>,
) -> Result<(Model, Vec<EpochRow>, usize)> {
    if let Some(hit) = stash.get(name, cfg)? {
        log(&format!("{name}: reusing checkpoint"));
        return Ok(hit);
    }
    let mut cb = |r: &EpochRecord| {
        log(&format!(
            "{name} epoch {}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}, lr {}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.val_loss.unwrap_or(f64::NAN),
            r.val_accuracy.unwrap_or(f64::NAN),
            r.lr
        ))
    };
    let (model, report) = run(&mut cb)?;
    let rows: Vec<EpochRow> = report.records.iter().map(EpochRow::from).collect();
    stash.put(name, cfg, &model, &rows, report.best_epoch)?;
    Ok((model, rows, report.best_epoch))
}

fn val_accuracy_at(rows: &[EpochRow], epoch: usize) -> Result<f64> {
    rows.iter()
        .find(|r| r.epoch == epoch)
        .map(|r| r.val_accuracy)
        .ok_or_else(|| Error::Config(format!("no record for epoch {epoch}")))
}

/// The desk-scale MNIST study: full-precision pretraining, binary training
/// from the transferred distribution, MAP and sampled-ensemble evaluation,
/// batch-norm re-estimation, error-coverage and the two ablations.
pub fn desk_mnist(plan: &DeskPlan, work: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<DeskOutcome> {
    let cfg = &plan.cfg;
    cfg.validate()?;
    let splits = &load_data(cfg)?;
    if cfg.init != InitScheme::Transfer || !cfg.batch_norm {
        return Err(Error::Config("the desk study trains the transfer-initialized network with batch norm".into()));
    }
    if plan.ablation_epochs == 0 || plan.ablation_epochs > cfg.epochs || plan.ablation_epochs > cfg.patience {
        return Err(Error::Config("ablation epochs must lie in 1..=min(epochs, patience)".into()));
    }
    let max_size = plan.ensemble_sizes.iter().copied().max().unwrap_or(0);
    if max_size == 0 || plan.ensemble_rounds == 0 || plan.reestimation_samples == 0 {
        return Err(Error::Config("ensemble sizes, rounds and samples must be positive".into()));
    }
    if plan.sample_eval_size == 0 || plan.sample_eval_size > splits.test.len() {
        return Err(Error::Config("sample_eval_size must lie in 1..=test size".into()));
    }
    if let Some(w) = work {
        std::fs::create_dir_all(w).map_err(|e| Error::io(w, e))?;
    }
    let stash = Stash { work };
    let outcome_path = work.map(|w| w.join("outcome.toml"));
    if let Some(p) = outcome_path.as_ref().filter(|p| p.exists()) {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        if let Ok(prev) = toml::from_str::<DeskOutcome>(&text) {
            if plan_key(&prev.plan) == plan_key(plan) {
                log("desk study: reusing stored outcome");
                return Ok(prev);
            }
        }
    }

    let (fp, pre_rows, _) = stage(&stash, "pretrain.blrn", cfg, log, |cb| pretrain(cfg, &load_pretrain_data(cfg)?, cb))?;
    let pretrain_test_accuracy = train::evaluate(&fp, &splits.test, 256, cfg.tau, &mut RngStream::new(0))?.1;
    log(&format!("pretrain test accuracy {pretrain_test_accuracy:.4}"));

    let init = initial_binary(cfg, Some(&fp))?;
    let (model, bin_rows, best_epoch) = stage(&stash, "binary.blrn", cfg, log, |cb| train_binary(cfg, splits, init, cb))?;

    let batches = reestimation_batches(&splits.train, cfg.batch_size, cfg.reestimate_batches, cfg.seed);
    let mut map = export::export(&model, ExportMode::Map, &mut RngStream::new(cfg.seed))?;
    let map_raw_test_accuracy = score(&net_logits(&map, &splits.test, cfg.f32_inference)?, splits.test.labels())?.1;
    export::reestimate_bn(&mut map, &batches, None)?;
    let map_test_accuracy = score(&net_logits(&map, &splits.test, cfg.f32_inference)?, splits.test.labels())?.1;
    log(&format!("MAP test accuracy {map_test_accuracy:.4} ({map_raw_test_accuracy:.4} before re-estimation)"));

    let subset = splits.test.slice(0, plan.sample_eval_size)?;
    let labels = subset.labels();
    let map_subset_accuracy = score(&net_logits(&map, &subset, cfg.f32_inference)?, labels)?.1;
    let mut rng = RngStream::substream(cfg.seed, streams::EXPORT);
    let mut ensembles: Vec<EnsembleRow> = plan.ensemble_sizes.iter().map(|&size| EnsembleRow { size, accuracies: Vec::new() }).collect();
    let mut reestimation = Vec::new();
    let mut coverage = Vec::new();
    for round in 0..plan.ensemble_rounds {
        let mut members = Vec::with_capacity(max_size);
        for k in 0..max_size {
            let raw = export::export(&model, ExportMode::Sample, &mut rng)?;
            let mut net = raw.clone();
            export::reestimate_bn(&mut net, &batches, None)?;
            let logits = net_logits(&net, &subset, cfg.f32_inference)?;
            if round == 0 && k < plan.reestimation_samples {
                let without = score(&net_logits(&raw, &subset, cfg.f32_inference)?, labels)?.1;
                let with = score(&logits, labels)?.1;
                log(&format!("sampled net {k}: accuracy {without:.4} without re-estimation, {with:.4} with"));
                reestimation.push((without, with));
            }
            members.push(logits);
        }
        let ls: Vec<Tensor> = members.iter().map(log_softmax).collect();
        for row in ensembles.iter_mut() {
            row.accuracies.push(ensemble_accuracy(&ls[..row.size], labels)?);
        }
        log(&format!(
            "ensemble round {round}: {}",
            ensembles.iter().map(|e| format!("{}-net {:.4}", e.size, e.accuracies[round])).collect::<Vec<_>>().join(", ")
        ));
        if round == 0 {
            coverage = coverage_curve(&members, labels, 100)?.points;
        }
    }
    // The first round may have fewer members than re-estimation samples.
    while reestimation.len() < plan.reestimation_samples {
        let raw = export::export(&model, ExportMode::Sample, &mut rng)?;
        let mut net = raw.clone();
        export::reestimate_bn(&mut net, &batches, None)?;
        let without = score(&net_logits(&raw, &subset, cfg.f32_inference)?, labels)?.1;
        let with = score(&net_logits(&net, &subset, cfg.f32_inference)?, labels)?.1;
        reestimation.push((without, with));
    }

    let k = plan.ablation_epochs;
    let transfer_bn = val_accuracy_at(&bin_rows, k)?;
    let xcfg = RunConfig {
        init: InitScheme::Xavier,
        epochs: k,
        ..cfg.clone()
    };
    let (_, xrows, _) = stage(&stash, "ablate-xavier.blrn", &xcfg, log, |cb| train_binary(&xcfg, splits, initial_binary(&xcfg, None)?, cb))?;
    let ncfg = RunConfig {
        batch_norm: false,
        epochs: k,
        ..cfg.clone()
    };
    let (fp_nobn, _, _) = stage(&stash, "ablate-nobn-pretrain.blrn", &ncfg, log, |cb| pretrain(&ncfg, &load_pretrain_data(&ncfg)?, cb))?;
    let (_, nrows, _) = stage(&stash, "ablate-nobn.blrn", &ncfg, log, |cb| {
        train_binary(&ncfg, splits, initial_binary(&ncfg, Some(&fp_nobn))?, cb)
    })?;
    let ablation = Ablation {
        epochs: k,
        transfer_bn,
        xavier_bn: val_accuracy_at(&xrows, k)?,
        transfer_no_bn: val_accuracy_at(&nrows, k)?,
    };
    log(&format!(
        "ablation after {k} epochs: transfer {:.4}, xavier {:.4}, no batch norm {:.4}",
        ablation.transfer_bn, ablation.xavier_bn, ablation.transfer_no_bn
    ));

    let outcome = DeskOutcome {
        plan: plan.clone(),
        pretrain_epochs: pre_rows,
        binary_epochs: bin_rows,
        best_epoch,
        pretrain_test_accuracy,
        map_raw_test_accuracy,
        map_test_accuracy,
        map_subset_accuracy,
        ensembles,
        reestimation,
        coverage,
        ablation,
    };
    if let Some(p) = outcome_path {
        let text = toml::to_string(&outcome).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(outcome)
}

fn plan_key(plan: &DeskPlan) -> (String, DeskPlan) {
    let mut p = plan.clone();
    p.cfg.data_dir = None;
    p.cfg.out_dir = PathBuf::new();
    (stash_key(&plan.cfg), p)
}
