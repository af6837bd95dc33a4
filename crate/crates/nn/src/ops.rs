//! Graph-free forward evaluations of the core operations.

use crate::kernels;
use crate::tensor::{matmul_t, Tensor};

/// `y = x W + b`, with `b` a `[1, out]` row broadcast over the rows of `x`.
pub fn dense_forward(w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
    assert_eq!(b.rows(), 1, "bias must be a row vector");
    assert_eq!(b.cols(), w.cols(), "bias width must match W");
    let mut y = matmul_t(x, false, w, false);
    let cols = y.cols();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % cols];
    }
    y
}

/// Normalizes every row to zero mean and unit variance, then applies
/// `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "layer norm epsilon must be positive");
    kernels::layer_norm_forward(x, gain, bias, eps).0
}

/// Single-head `softmax(Q Kᵀ / sqrt(d_k)) V`. Returns `(output, scores)`
/// where `scores` is the row-stochastic attention matrix.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let tokens = q.rows();
    let (out, probs) = kernels::attention_forward(q, k, v, tokens, 1);
    (out, Tensor::matrix(tokens, tokens, probs))
}
