//! Small differentiable-computation kernel: row-major `f64` tensors, a
//! reverse-mode tape, dense/layer-norm/attention layers and Adam.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use layers::{Activation, Dense, LayerNorm, Mlp, MultiHeadAttention};
pub use ops::{dense_forward, layer_norm, scaled_dot_attention};
pub use params::{glorot_uniform, AdamConfig, Bound, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite gradient for parameter `{name}`; update rejected")]
    NonFiniteGradient { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
