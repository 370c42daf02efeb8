//! Convolutional building blocks with hand-written backpropagation, the two
//! backbone families, and the fused ensemble.

pub mod backbone;
pub mod blocks;
pub mod ensemble;
pub mod layers;
pub mod param;
pub mod tensor;

use thiserror::Error;

pub use backbone::{Backbone, BackboneConfig, BackboneOutput, DenseNetConfig, ResNetConfig, StemConfig};
pub use blocks::{DenseBlock, DenseBlockConfig, ResidualBlock, ResidualBlockConfig};
pub use ensemble::{argmax, softmax, softmax_rows, EnsembleModel, EnsembleOutput, Fusion, ModelConfig, ModelVariant};
pub use layers::Mode;
pub use param::{param_count, zero_grads, Param, TensorKind, Visit};
pub use tensor::{Matrix, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backbones disagree on class count ({a} vs {b})")]
    FusionMismatch { a: usize, b: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}
