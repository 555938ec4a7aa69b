//! Model building blocks: parameters, embeddings, expert MLPs, the noisy
//! top-k gate and the CES / MMOE forward passes.

mod dense;
mod gate;
mod model;
mod params;

pub use dense::{EmbeddingField, EmbeddingTable, ExpertMlp, Linear};
pub use gate::{gate_forward, top_k_indices, GateOutput, Noise, NoisyTopKGate};
pub use model::{CesModel, ForwardOutput, Gating, Inference, ModelConfig};
pub use params::{Bound, ParamId, ParamStore};
