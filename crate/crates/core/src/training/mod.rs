//! Losses, posterior weights, gradient identities and the phased trainer.

mod identities;
mod loss;
mod optim;
mod trainer;

use thiserror::Error;

use crate::grad::GradError;
use crate::model::{Model, ModelError};

pub use identities::{mixture_gradient_error, random_instance, verify_posterior_gradients, verify_impartial_bound, PosteriorGradientReport, ImpartialBoundReport};
pub use loss::{component_log_densities, impartial_loss, impartial_loss_graph, instance_nll, mixture_nll, mixture_nll_graph, posterior_weights};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use trainer::{batch_gradients, source_wise_rmse, train, Phase, PhasedSchedule, TrainDiagnostics};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at instance {instance} (value {value})")]
    NonFinite { instance: usize, value: f64 },
    #[error("instance {instance}: log-normal target {value} is not positive")]
    NonPositiveTarget { instance: usize, value: f64 },
    #[error("all component densities underflow for this target")]
    DensityUnderflow,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("dataset does not match the model: {0}")]
    Mismatch(String),
    #[error("training diverged at epoch {epoch}; returning the last finite parameters")]
    Diverged { epoch: usize, last_finite: Box<Model> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
