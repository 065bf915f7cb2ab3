//! Neural mixture model for probabilistic forecasting over multi-source
//! time series.
//!
//! Each data source gets its own recurrent encoder and distribution head; a
//! softmax weight module mixes the per-source predictive distributions.
//! Training can start with an impartial phase that fits every source on an
//! equal-weighted bound before the full mixture loss takes over.

pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod distributions;
pub mod grad;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod study;
pub mod training;

pub use distributions::{DistKind, DistParams};
pub use grad::{Tape, Tensor};
pub use model::{Model, ModelConfig, ModelParams, MixtureOutput};
