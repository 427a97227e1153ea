//! Stochastic binary neural networks trained with the local reparameterization
//! trick, plus the machinery to turn a trained weight distribution into
//! deterministic binary networks.
//!
//! The crate is `no_std` + `alloc`. The `std` feature (on by default) only
//! enables runtime CPU feature detection in the matrix kernels and std
//! integration of the error type.
//!
//! Layout:
//!
//! - [`tensor`], [`linalg`], [`tape`], [`gradcheck`]: a small dense tensor
//!   engine with reverse-mode automatic differentiation.
//! - [`stochastic`]: binary weight distributions, Gaussian pre-activations,
//!   binarization and Binary Concrete sampling.
//! - [`norm_pool`]: batch normalization and max pooling on Gaussian
//!   pre-activations.
//! - [`dataset`]: in-memory labelled image sets.
//! - [`arch`], [`model`], [`objective`], [`optim`], [`train`]: network
//!   description, parameters, losses, Adam and the training loop.
//! - [`export`], [`metrics`]: deterministic binary networks, ensembles and
//!   error-coverage evaluation.
//! - [`bitpack`]: XNOR/popcount inference with folded batch-norm thresholds.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod arch;
pub mod bitpack;
pub mod dataset;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod model;
pub mod norm_pool;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod stochastic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tape::{GradientMap, ParamId, Tape, Var};
pub use tensor::Tensor;
