//! Small reverse-mode autodiff library over f64 matrices, with dense
//! layers, Adam, checkpointing and a smoothed selective-state-space block.

pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod smamba;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use layers::{forward_dense, Dense};
pub use params::{AdamConfig, ParamStore};
pub use smamba::{SMamba, SMambaConfig, ScanMode};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
