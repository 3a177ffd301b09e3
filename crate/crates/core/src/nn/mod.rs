//! Small dense float64 autodiff engine: tensors, a reverse-mode tape, the
//! layers the policy and surrogate need, Adam, and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, Param, ParamId, ParamStore, Var};
pub use layers::{causal_mask, sinusoidal, Ctx, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, MASKED};
pub use optim::Adam;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("model dim {d_model} is not divisible by {heads} heads")]
    HeadDim { d_model: usize, heads: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
