use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: {detail} at byte offset {offset}")]
    Format {
        what: String,
        offset: u64,
        detail: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] blrnet_core::Error),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(what: impl Into<String>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Whether the error stems from invalid user input rather than a failure
    /// while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Core(blrnet_core::Error::Architecture(_)) | Error::Core(blrnet_core::Error::InvalidArgument(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
