//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use blrnet_core::arch::NetMode;
use blrnet_core::bitpack::BitNet;
use blrnet_core::export::{self, det_forward, det_forward_f32, log_softmax, ExportMode};
use blrnet_core::model::Model;
use blrnet_core::train::{self, streams, EpochRecord};
use blrnet_core::{RngStream, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{self, Checkpoint, Kind};
use crate::config::{InitScheme, RunConfig};
use crate::error::{Error, Result};
use crate::experiments::{self, coverage_curve, ensemble_accuracy, net_logits, score};
use crate::report::{CsvOut, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "blrnet", version, about = "Train and evaluate stochastic binary neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset root (defaults to $BLRNET_DATA_DIR, then ./data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    train_size: Option<usize>,
    #[arg(long, global = true)]
    pretrain_size: Option<usize>,
    #[arg(long, global = true)]
    test_size: Option<usize>,
    #[arg(long, global = true)]
    arch: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Map,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Transfer,
    Xavier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Det,
    Bit,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the full-precision network used for transfer initialization.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the binary weight distribution.
    Train {
        #[command(flatten)]
        common: Common,
        /// Pretrained full-precision checkpoint (default: <out>/pretrain.blrn,
        /// trained first when missing).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Export a deterministic binary net from a trained model.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "map")]
        mode: ModeArg,
        /// Trained model (default: <out>/model.blrn).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Output file (default: <out>/net.blrn).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-estimate the batch-norm statistics of an exported net.
    ReestimateBn {
        #[command(flatten)]
        common: Common,
        /// Exported net (default: <out>/net.blrn).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Output file (default: <out>/net-reestimated.blrn).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of training batches (default from the configuration).
        #[arg(long)]
        batches: Option<usize>,
        /// Exponential moving average weight; plain average when unset.
        #[arg(long)]
        momentum: Option<f64>,
    },
    /// Test-set loss and accuracy of a model or an exported net.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model or net checkpoint (default: <out>/net.blrn).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "det")]
        engine: EngineArg,
    },
    /// Accuracy of sampled ensembles of growing size.
    EnsembleEval {
        #[command(flatten)]
        common: Common,
        /// Trained model (default: <out>/model.blrn).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        ensemble: usize,
    },
    /// Error-coverage curve of the MAP net (`--ensemble 1`) or a sampled
    /// ensemble.
    Coverage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        ensemble: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Compare the configured run with a variant trained for the same
    /// number of epochs.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_batchnorm: bool,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
    },
    /// Time deterministic and bit-packed inference.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Exported net (default: a MAP export of a freshly initialized model).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 16, 128])]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain { common }
            | Command::Train { common, .. }
            | Command::Export { common, .. }
            | Command::ReestimateBn { common, .. }
            | Command::Eval { common, .. }
            | Command::EnsembleEval { common, .. }
            | Command::Coverage { common, .. }
            | Command::Ablate { common, .. }
            | Command::Bench { common, .. } => common,
        }
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.data_dir {
        cfg.data_dir = Some(v.clone());
    }
    if let Some(v) = &c.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = c.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = c.pretrain_epochs {
        cfg.pretrain_epochs = v;
    }
    if let Some(v) = c.train_size {
        cfg.train_size = Some(v);
    }
    if let Some(v) = c.pretrain_size {
        cfg.pretrain_size = Some(v);
    }
    if let Some(v) = c.test_size {
        cfg.test_size = Some(v);
    }
    if let Some(v) = &c.arch {
        cfg.arch = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let result = resolve_config(cli.command.common()).and_then(|cfg| dispatch(&cli.command, &cfg));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_INVALID
            } else {
                EXIT_FAILED
            }
        }
    }
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    match cmd {
        Command::Pretrain { .. } => cmd_pretrain(cfg).map(|_| ()),
        Command::Train { from, .. } => cmd_train(cfg, from.as_deref()),
        Command::Export { mode, from, out, .. } => cmd_export(cfg, *mode, from.as_deref(), out.as_deref()),
        Command::ReestimateBn {
            from,
            out,
            batches,
            momentum,
            ..
        } => cmd_reestimate(cfg, from.as_deref(), out.as_deref(), *batches, *momentum),
        Command::Eval { from, engine, .. } => cmd_eval(cfg, from.as_deref(), *engine),
        Command::EnsembleEval { from, ensemble, .. } => cmd_ensemble(cfg, from.as_deref(), *ensemble),
        Command::Coverage { from, ensemble, steps, .. } => cmd_coverage(cfg, from.as_deref(), *ensemble, *steps),
        Command::Ablate { no_batchnorm, init, .. } => cmd_ablate(cfg, *no_batchnorm, *init),
        Command::Bench { from, batch, repeats, .. } => cmd_bench(cfg, from.as_deref(), batch, *repeats),
    }
}

fn out_path(cfg: &RunConfig, explicit: Option<&Path>, default: &str) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(default))
}

fn provenance(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![("config".into(), cfg.to_toml())]
}

fn epoch_logger<'a>(csv: &'a mut CsvOut, label: &'a str, failure: &'a mut Option<Error>) -> impl FnMut(&EpochRecord) + 'a {
    move |r: &EpochRecord| {
        eprintln!(
            "{label} epoch {}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.val_loss.unwrap_or(f64::NAN),
            r.val_accuracy.unwrap_or(f64::NAN)
        );
        let mut write = || -> Result<()> {
            csv.metric(Some(r.epoch), "train", Some(r.train_loss), r.train_accuracy)?;
            if let (Some(l), Some(a)) = (r.val_loss, r.val_accuracy) {
                csv.metric(Some(r.epoch), "val", Some(l), a)?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            failure.get_or_insert(e);
        }
    }
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<Model> {
    let splits = experiments::load_pretrain_data(cfg)?;
    let mut csv = CsvOut::create(&cfg.out_dir.join("pretrain.csv"), cfg, &METRICS_HEADER)?;
    let mut failure = None;
    let (model, _) = experiments::pretrain(cfg, &splits, &mut epoch_logger(&mut csv, "pretrain", &mut failure))?;
    if let Some(e) = failure {
        return Err(e);
    }
    let (loss, acc) = train::evaluate(&model, &splits.test, 256, cfg.tau, &mut RngStream::substream(cfg.seed, streams::EVAL))?;
    csv.metric(None, "test", Some(loss), acc)?;
    csv.finish()?;
    checkpoint::save(&cfg.out_dir.join("pretrain.blrn"), &Checkpoint::from_model(&model, cfg.seed, provenance(cfg)))?;
    Ok(model)
}

fn load_model(path: &Path) -> Result<Model> {
    let ck = checkpoint::load(path)?;
    match ck.kind {
        Kind::Model => ck.to_model(),
        Kind::Net => Err(Error::Config(format!("{} holds a deterministic net, expected a trained model", path.display()))),
    }
}

fn cmd_train(cfg: &RunConfig, from: Option<&Path>) -> Result<()> {
    let pretrained = match (cfg.init, from) {
        (InitScheme::Xavier, _) => None,
        (InitScheme::Transfer, Some(p)) => Some(load_model(p)?),
        (InitScheme::Transfer, None) => {
            let p = cfg.out_dir.join("pretrain.blrn");
            Some(match p.exists() {
                true => load_model(&p)?,
                false => cmd_pretrain(cfg)?,
            })
        }
    };
    if pretrained.as_ref().is_some_and(|m| m.mode() != NetMode::FullPrecision) {
        return Err(Error::Config("transfer source must be a full-precision model".into()));
    }
    let splits = experiments::load_data(cfg)?;
    let init = experiments::initial_binary(cfg, pretrained.as_ref())?;
    let mut csv = CsvOut::create(&cfg.out_dir.join("train.csv"), cfg, &METRICS_HEADER)?;
    let mut failure = None;
    let (model, _) = experiments::train_binary(cfg, &splits, init, &mut epoch_logger(&mut csv, "train", &mut failure))?;
    if let Some(e) = failure {
        return Err(e);
    }
    let (loss, acc) = train::evaluate(&model, &splits.test, 256, cfg.tau, &mut RngStream::substream(cfg.seed, streams::EVAL))?;
    csv.metric(None, "test", Some(loss), acc)?;
    csv.finish()?;
    checkpoint::save(&cfg.out_dir.join("model.blrn"), &Checkpoint::from_model(&model, cfg.seed, provenance(cfg)))
}

fn cmd_export(cfg: &RunConfig, mode: ModeArg, from: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let model = load_model(&out_path(cfg, from, "model.blrn"))?;
    let mode = match mode {
        ModeArg::Map => ExportMode::Map,
        ModeArg::Sample => ExportMode::Sample,
    };
    let net = export::export(&model, mode, &mut RngStream::substream(cfg.seed, streams::EXPORT))?;
    let splits = experiments::load_data(cfg)?;
    let (loss, acc) = score(&net_logits(&net, &splits.test, cfg.f32_inference)?, splits.test.labels())?;
    let mut csv = CsvOut::create(&cfg.out_dir.join("export.csv"), cfg, &METRICS_HEADER)?;
    csv.metric(None, "test", Some(loss), acc)?;
    csv.finish()?;
    checkpoint::save(&out_path(cfg, out, "net.blrn"), &Checkpoint::from_net(&net, cfg.seed, provenance(cfg)))
}

fn cmd_reestimate(cfg: &RunConfig, from: Option<&Path>, out: Option<&Path>, batches: Option<usize>, momentum: Option<f64>) -> Result<()> {
    let mut net = checkpoint::load(&out_path(cfg, from, "net.blrn"))?.to_net()?;
    let splits = experiments::load_data(cfg)?;
    let count = batches.unwrap_or(cfg.reestimate_batches);
    if count == 0 {
        return Err(Error::Config("at least one batch is needed".into()));
    }
    let labels = splits.test.labels();
    let before = score(&net_logits(&net, &splits.test, cfg.f32_inference)?, labels)?;
    let xs = experiments::reestimation_batches(&splits.train, cfg.batch_size, count, cfg.seed);
    export::reestimate_bn(&mut net, &xs, momentum)?;
    let after = score(&net_logits(&net, &splits.test, cfg.f32_inference)?, labels)?;
    let mut csv = CsvOut::create(&cfg.out_dir.join("reestimate-bn.csv"), cfg, &METRICS_HEADER)?;
    csv.metric(None, "test-before", Some(before.0), before.1)?;
    csv.metric(None, "test-after", Some(after.0), after.1)?;
    csv.finish()?;
    checkpoint::save(&out_path(cfg, out, "net-reestimated.blrn"), &Checkpoint::from_net(&net, cfg.seed, provenance(cfg)))
}

fn cmd_eval(cfg: &RunConfig, from: Option<&Path>, engine: EngineArg) -> Result<()> {
    let ck = checkpoint::load(&out_path(cfg, from, "net.blrn"))?;
    let splits = experiments::load_data(cfg)?;
    let labels = splits.test.labels();
    let (split, (loss, acc)) = match ck.kind {
        Kind::Model => {
            let model = ck.to_model()?;
            let r = train::evaluate(&model, &splits.test, 256, cfg.tau, &mut RngStream::substream(cfg.seed, streams::EVAL))?;
            ("test-model", r)
        }
        Kind::Net => {
            let net = ck.to_net()?;
            match engine {
                EngineArg::Det => ("test", score(&net_logits(&net, &splits.test, cfg.f32_inference)?, labels)?),
                EngineArg::Bit => {
                    let bits = BitNet::compile(&net)?;
                    let mut data = Vec::new();
                    for (x, _) in splits.test.sequential_batches(500) {
                        let out = bits.forward(&x)?;
                        for w in &out.warnings {
                            eprintln!("warning: {w}");
                        }
                        data.extend_from_slice(out.logits.data());
                    }
                    let logits = Tensor::new(vec![splits.test.len(), net.classes()], data)?;
                    ("test-bit", score(&logits, labels)?)
                }
            }
        }
    };
    let mut csv = CsvOut::create(&cfg.out_dir.join("eval.csv"), cfg, &METRICS_HEADER)?;
    csv.metric(None, split, Some(loss), acc)?;
    csv.finish()
}

/// Logits of `count` sampled, re-estimated nets on the test split.
fn sampled_logits(cfg: &RunConfig, model: &Model, splits: &crate::data::Splits, count: usize) -> Result<Vec<Tensor>> {
    let batches = experiments::reestimation_batches(&splits.train, cfg.batch_size, cfg.reestimate_batches, cfg.seed);
    let mut rng = RngStream::substream(cfg.seed, streams::EXPORT);
    (0..count)
        .map(|_| {
            let net = experiments::sample_net(model, &mut rng, Some(&batches))?;
            net_logits(&net, &splits.test, cfg.f32_inference)
        })
        .collect()
}

fn cmd_ensemble(cfg: &RunConfig, from: Option<&Path>, size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::Config("ensemble size must be positive".into()));
    }
    let model = load_model(&out_path(cfg, from, "model.blrn"))?;
    let splits = experiments::load_data(cfg)?;
    let labels = splits.test.labels();
    let mut csv = CsvOut::create(&cfg.out_dir.join("ensemble-eval.csv"), cfg, &METRICS_HEADER)?;
    let map = export::export(&model, ExportMode::Map, &mut RngStream::new(cfg.seed))?;
    let (l, a) = score(&net_logits(&map, &splits.test, cfg.f32_inference)?, labels)?;
    csv.metric(None, "test-map", Some(l), a)?;
    let members: Vec<Tensor> = sampled_logits(cfg, &model, &splits, size)?.iter().map(log_softmax).collect();
    for k in 1..=size {
        let acc = ensemble_accuracy(&members[..k], labels)?;
        let mut sum = members[0].clone();
        for m in &members[1..k] {
            sum = sum.zip_map(m, "ensemble", |a, b| a + b)?;
        }
        let (loss, _) = score(&sum, labels)?;
        csv.metric(None, &format!("test-ensemble-{k}"), Some(loss), acc)?;
    }
    csv.finish()
}

fn cmd_coverage(cfg: &RunConfig, from: Option<&Path>, size: usize, steps: usize) -> Result<()> {
    if size == 0 || steps == 0 {
        return Err(Error::Config("ensemble size and steps must be positive".into()));
    }
    let model = load_model(&out_path(cfg, from, "model.blrn"))?;
    let splits = experiments::load_data(cfg)?;
    let logits = match size {
        1 => vec![net_logits(&export::export(&model, ExportMode::Map, &mut RngStream::new(cfg.seed))?, &splits.test, cfg.f32_inference)?],
        n => sampled_logits(cfg, &model, &splits, n)?,
    };
    let curve = coverage_curve(&logits, splits.test.labels(), steps)?;
    let mut csv = CsvOut::create(&cfg.out_dir.join("coverage.csv"), cfg, &["coverage", "error"])?;
    for (c, e) in &curve.points {
        csv.row(&[c.to_string(), e.to_string()])?;
    }
    csv.finish()
}

fn cmd_ablate(cfg: &RunConfig, no_batchnorm: bool, init: Option<InitArg>) -> Result<()> {
    let mut variant = cfg.clone();
    if no_batchnorm {
        variant.batch_norm = false;
    }
    if let Some(i) = init {
        variant.init = match i {
            InitArg::Transfer => InitScheme::Transfer,
            InitArg::Xavier => InitScheme::Xavier,
        };
    }
    if variant == *cfg {
        return Err(Error::Config("ablate needs --no-batchnorm or an --init different from the configuration".into()));
    }
    let splits = experiments::load_data(cfg)?;
    let mut csv = CsvOut::create(&cfg.out_dir.join("ablate.csv"), cfg, &METRICS_HEADER)?;
    for (label, run) in [("baseline", cfg), ("variant", &variant)] {
        let pretrained = match run.init {
            InitScheme::Transfer => Some(experiments::pretrain(run, &experiments::load_pretrain_data(run)?, &mut |r| eprintln!("{label} pretrain epoch {}", r.epoch))?.0),
            InitScheme::Xavier => None,
        };
        let init = experiments::initial_binary(run, pretrained.as_ref())?;
        let (_, report) = experiments::train_binary(run, &splits, init, &mut |r| {
            eprintln!("{label} epoch {}: val acc {:.4}", r.epoch, r.val_accuracy.unwrap_or(f64::NAN))
        })?;
        for r in &report.records {
            if let (Some(l), Some(a)) = (r.val_loss, r.val_accuracy) {
                csv.metric(Some(r.epoch), &format!("val-{label}"), Some(l), a)?;
            }
        }
    }
    csv.finish()
}

fn cmd_bench(cfg: &RunConfig, from: Option<&Path>, batches: &[usize], repeats: usize) -> Result<()> {
    if repeats == 0 || batches.contains(&0) {
        return Err(Error::Config("batch sizes and repeats must be positive".into()));
    }
    let net = match from {
        Some(p) => checkpoint::load(p)?.to_net()?,
        None => {
            let model = train::xavier_init(&cfg.model_spec()?, cfg.seed)?;
            export::export(&model, ExportMode::Map, &mut RngStream::new(cfg.seed))?
        }
    };
    let bits = BitNet::compile(&net)?;
    let [c, h, w] = net.spec().input;
    let mut rng = RngStream::substream(cfg.seed, streams::EVAL);
    let mut csv = CsvOut::create(&cfg.out_dir.join("bench.csv"), cfg, &["n", "engine", "ns_per_inference"])?;
    for &n in batches {
        let x = Tensor::new(vec![n, c, h, w], rng.normals(n * c * h * w))?;
        let engines: [(&str, &dyn Fn() -> blrnet_core::Result<Tensor>); 3] = [
            ("det-f64", &|| det_forward(&net, &x)),
            ("det-f32", &|| det_forward_f32(&net, &x)),
            ("bit", &|| bits.forward(&x).map(|o| o.logits)),
        ];
        for (name, f) in engines {
            f()?;
            let t = Instant::now();
            for _ in 0..repeats {
                f()?;
            }
            let ns = t.elapsed().as_nanos() as f64 / (repeats * n) as f64;
            eprintln!("n={n} {name}: {ns:.0} ns/inference");
            csv.row(&[n.to_string(), name.to_string(), format!("{ns:.0}")])?;
        }
    }
    csv.finish()
}
