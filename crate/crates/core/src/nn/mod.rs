//! A small sequential-network kernel: layers, backprop, Adam.

pub mod gradcheck;
pub mod layer;
pub mod model;
pub mod network;
pub mod ops;
pub mod train;

pub use gradcheck::{gradient_check, GradCheckOptions};
pub use layer::{LayerKind, LayerSpec};
pub use model::{Freeze, LayerParams, ModelBuilder, ModelGraph};
pub use network::{backward, forward, forward_traced, Gradients, Mode};
pub use train::{evaluate, train, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("layer {layer_index} ({kind}): expected input {expected}, got {actual:?}")]
    ShapeMismatch {
        layer_index: usize,
        kind: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("invalid model structure: {0}")]
    Structure(String),
    #[error("non-finite values at layer {layer_index} ({context})")]
    NonFinite { layer_index: usize, context: String },
    #[error("loss became {loss} at epoch {epoch}, step {step}; first non-finite gradient in layer {layer:?}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        layer: Option<usize>,
    },
    #[error("dataset: {0}")]
    Data(String),
}
