//! Multi-domain CTR prediction with sparse conditional expert selection.
//!
//! The crate is organised bottom-up:
//!
//! - [`matrix`] and [`autodiff`]: dense 2-D values and a reverse-mode tape.
//! - [`layers`]: embeddings, expert MLPs, the noisy top-k gate and the
//!   CES / MMOE forward passes.
//! - [`aea`]: the EMA joint domain/expert distribution and the
//!   mutual-information loss that couples experts to domains.
//! - [`train`]: losses, Adam, variants, the trainer and checkpoints.
//! - [`data`] and [`metrics`]: datasets, the synthetic generator, CSV IO and
//!   ranking metrics (AUC, grouped AUC, Recall@N-K).

pub mod aea;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod layers;
pub mod matrix;
pub mod metrics;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
