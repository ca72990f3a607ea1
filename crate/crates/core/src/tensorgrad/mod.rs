//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its tensors in topological
//! order; [`Tape::backward`] walks the record once in reverse and accumulates
//! gradients into every `requires_grad` ancestor of the loss.
//!
//! The op set is exactly what the encoder, projection head, and contrastive
//! loss need: conv2d, linear, relu, global average pooling, row-wise L2
//! normalization, elementwise add/mul, sum, the NT-Xent loss, plus the two
//! supervised heads (softmax cross-entropy and L1). Everything is generic
//! over [`Element`] so the same code runs in f32 for training and f64 for
//! gradient checking.

mod gradcheck;
mod tape;
#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, grad_check_with_corruption, GradCheckReport, ParamSpec};
pub use tape::{cosine_similarity_from_norms, row_norms, Element, Tape, TensorId};

use thiserror::Error;

/// Errors raised by tape construction and traversal.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardWithoutReset,
    #[error("row {row} has (near-)zero norm; cosine similarity is undefined")]
    ZeroNormRow { row: usize },
    #[error("temperature must be positive, got {tau}")]
    InvalidTemperature { tau: f64 },
    #[error("contrastive batch must have an even row count >= 2, got {rows}")]
    BadContrastiveBatch { rows: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;
