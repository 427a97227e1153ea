//! Run configuration, read from TOML and overridable from the command line.

use std::path::{Path, PathBuf};

use blrnet_core::arch::{ModelSpec, MNIST_ARCH};
use blrnet_core::objective::{ObjectiveConfig, ObjectiveKind};
use blrnet_core::optim::PlateauScheduler;
use blrnet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image counts written as an integer, or `"all"` for `None`, so that every
/// value survives a round trip through TOML.
mod image_count {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Count(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => Repr::Count(*n),
            None => Repr::Word("all".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Some(n)),
            Repr::Word(w) if w == "all" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("expected an image count or \"all\", got \"{w}\""))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Distributions fitted to a pretrained full-precision network.
    Transfer,
    Xavier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Variance,
    Bound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetName,
    /// Dataset root; falls back to `$BLRNET_DATA_DIR`, then `./data`.
    pub data_dir: Option<PathBuf>,
    /// Training images kept after the validation split; `"all"` keeps
    /// every one.
    #[serde(with = "image_count")]
    pub train_size: Option<usize>,
    /// Training images for full-precision pretraining.
    #[serde(with = "image_count")]
    pub pretrain_size: Option<usize>,
    /// Evaluate on the first `test_size` test images only.
    #[serde(with = "image_count")]
    pub test_size: Option<usize>,
    pub arch: String,
    pub batch_norm: bool,
    pub bias: bool,
    pub init: InitScheme,
    pub objective: Objective,
    pub beta_var: f64,
    pub wd_softmax: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub lr_factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub augment: bool,
    pub zca: bool,
    pub zca_eps: f64,
    /// Batches used to re-estimate batch norm of sampled nets.
    pub reestimate_batches: usize,
    /// Run deterministic inference in single precision.
    pub f32_inference: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetName::Mnist,
            data_dir: None,
            train_size: Some(10_000),
            pretrain_size: Some(30_000),
            test_size: None,
            arch: MNIST_ARCH.into(),
            batch_norm: true,
            bias: false,
            init: InitScheme::Transfer,
            objective: Objective::Variance,
            beta_var: 1e-6,
            wd_softmax: 1e-4,
            tau: 1.0,
            lr: 1e-2,
            batch_size: 128,
            epochs: 20,
            pretrain_lr: 1e-3,
            pretrain_epochs: 5,
            lr_factor: 0.1,
            patience: 10,
            min_lr: 1e-5,
            seed: 0,
            augment: false,
            zca: false,
            zca_eps: crate::data::zca::DEFAULT_EPS,
            reestimate_batches: 5,
            f32_inference: false,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.dataset {
            DatasetName::Mnist => [1, 28, 28],
            DatasetName::Cifar10 => [3, 32, 32],
        }
    }

    /// Binary-mode architecture with the configured batch norm and bias.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::parse(&self.arch, self.input_shape())?
            .with_batch_norm(self.batch_norm)
            .with_bias(self.bias))
    }

    fn train_config(&self, lr: f64, epochs: usize, train_len: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr,
            objective: ObjectiveConfig {
                beta_var: self.beta_var,
                wd_softmax: self.wd_softmax,
                tau: self.tau,
                kind: match self.objective {
                    Objective::Variance => ObjectiveKind::VarianceRegularized,
                    Objective::Bound => ObjectiveKind::VariationalBound,
                },
                train_size: train_len.max(1),
            },
            scheduler: PlateauScheduler {
                factor: self.lr_factor,
                patience: self.patience,
                min_lr: self.min_lr,
                ..PlateauScheduler::default()
            },
            seed: self.seed,
        }
    }

    pub fn binary_train_config(&self, train_len: usize) -> TrainConfig {
        self.train_config(self.lr, self.epochs, train_len)
    }

    pub fn pretrain_config(&self, train_len: usize) -> TrainConfig {
        self.train_config(self.pretrain_lr, self.pretrain_epochs, train_len)
    }

    /// Checks every field before any data is touched.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let spec = self.model_spec().map_err(|e| Error::Config(e.to_string()))?;
        spec.plan().map_err(|e| Error::Config(e.to_string()))?;
        if spec.classes().map_err(|e| Error::Config(e.to_string()))? != 10 {
            return bad("both datasets have 10 classes; the architecture must end in SM10".into());
        }
        self.binary_train_config(1).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pretrain_config(1).validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.min_lr >= 0.0) {
            return bad("min_lr must be non-negative".into());
        }
        if self.train_size.is_some_and(|n| n < 2) {
            return bad("train_size must be at least 2".into());
        }
        if self.pretrain_size.is_some_and(|n| n < 2) {
            return bad("pretrain_size must be at least 2".into());
        }
        if self.test_size == Some(0) {
            return bad("test_size must be positive".into());
        }
        if self.zca && !(self.zca_eps > 0.0) {
            return bad("zca_eps must be positive".into());
        }
        if self.dataset == DatasetName::Mnist && (self.zca || self.augment) {
            return bad("whitening and augmentation apply to cifar10 only".into());
        }
        if self.reestimate_batches == 0 {
            return bad("reestimate_batches must be at least 1".into());
        }
        Ok(())
    }
}
