//! Datasets, checkpoints, configuration and experiment drivers around
//! [`blrnet_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod report;

pub use error::{Error, Result};
