//! Minimal feed-forward neural-network engine: deterministic Xavier-normal
//! initialization, exact reverse-mode gradients, Adam, and mini-batch
//! training with validation-based early stopping.

pub mod adam;
pub mod mlp;
pub mod train;

pub use adam::AdamState;
pub use mlp::{softplus, Activation, ForwardCache, Gradients, Layer, Mlp};
pub use train::{train_with_early_stopping, BatchLoss, FitReport, MseLoss, TrainConfig};
