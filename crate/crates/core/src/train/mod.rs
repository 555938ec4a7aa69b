//! Losses, the Adam optimiser, ablation variants, the training loop and
//! checkpoints.

mod adam;
pub mod checkpoint;
mod config;
mod loss;
mod trainer;

pub use adam::AdamState;
pub use config::{AblationVariant, TrainConfig};
pub use loss::{bce_loss, total_loss};
pub use trainer::{
    bound_from, loss_terms, EpochMetrics, EvalMetrics, GroupKey, LossTerms, StepMetrics, Trainer,
};
