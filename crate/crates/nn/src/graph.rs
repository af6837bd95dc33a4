//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is applied; [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Graphs are built per
//! forward pass and dropped afterwards, so there is no shared mutable state.
//!
//! Shape errors are contract violations and panic.

use crate::kernels;
use crate::tensor::{matmul_t, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Minimum(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    TakeRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Parameters and data inputs are both leaves; whether a
    /// gradient is wanted is decided by the caller reading [`Gradients`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = matmul_t(self.value(a), false, self.value(b), false);
        self.push(y, Op::MatMul(a, b))
    }

    /// `x + b` with `b` a `[1, cols]` row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(bv.cols(), xv.cols(), "bias width mismatch");
        let cols = xv.cols();
        let mut y = xv.clone();
        for (i, out) in y.data_mut().iter_mut().enumerate() {
            *out += bv.data()[i % cols];
        }
        self.push(y, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(y, Op::Mul(a, b))
    }

    /// `x * s` where `s` is a `[1, 1]` node.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let y = self.value(x).map(|v| v * sv);
        self.push(y, Op::MulScalarVar(x, s))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddConst(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::exp);
        self.push(y, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::ln);
        self.push(y, Op::Log(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::softplus);
        self.push(y, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square(x))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), f64::min);
        self.push(y, Op::Minimum(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(y, Op::MeanAll(x))
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sums: Vec<f64> = (0..xv.rows()).map(|r| xv.row_slice(r).iter().sum()).collect();
        let y = Tensor::column(&sums);
        self.push(y, Op::SumCols(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat row mismatch");
                data.extend_from_slice(pv.row_slice(r));
            }
        }
        self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start < end && end <= xv.cols(), "column slice out of range");
        let mut data = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row_slice(r)[start..end]);
        }
        let y = Tensor::matrix(xv.rows(), end - start, data);
        self.push(y, Op::SliceCols(x, start))
    }

    /// Gathers the listed rows of `x` (repeats allowed).
    pub fn take_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in rows {
            data.extend_from_slice(xv.row_slice(r));
        }
        let y = Tensor::matrix(rows.len(), xv.cols(), data);
        self.push(y, Op::TakeRows(x, rows.to_vec()))
    }

    /// Row-wise layer normalization followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (y, xhat, inv_std) =
            kernels::layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over a batch of token groups.
    ///
    /// `q`, `k`, `v` hold `batch * tokens` rows; rows `b*tokens..(b+1)*tokens`
    /// form one sequence. Heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tokens: usize, heads: usize) -> Var {
        let (out, probs) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), tokens, heads);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                probs,
            },
        )
    }

    /// Head-averaged attention matrices of an [`Graph::attention`] node, one
    /// `tokens x tokens` tensor per sequence in the batch.
    pub fn attention_scores(&self, v: Var) -> Option<Vec<Tensor>> {
        match &self.nodes[v.0].op {
            Op::Attention {
                tokens,
                heads,
                probs,
                ..
            } => Some(kernels::average_heads(probs, *tokens, *heads)),
            _ => None,
        }
    }

    /// Reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_t(&dy, false, self.value(*b), true);
                    let db = matmul_t(self.value(*a), true, &dy, false);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let cols = dy.cols();
                    let mut db = vec![0.0; cols];
                    for (i, g) in dy.data().iter().enumerate() {
                        db[i % cols] += g;
                    }
                    accumulate(&mut grads, *b, Tensor::row(&db));
                    accumulate(&mut grads, *x, dy.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, dy.map(|g| -g));
                    accumulate(&mut grads, *a, dy.clone());
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(self.value(*b), |g, y| g * y);
                    let db = dy.zip_map(self.value(*a), |g, x| g * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulScalarVar(x, s) => {
                    let sv = self.value(*s).item();
                    let ds: f64 = dy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, xv)| g * xv)
                        .sum();
                    accumulate(&mut grads, *s, Tensor::scalar(ds));
                    accumulate(&mut grads, *x, dy.map(|g| g * sv));
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, dy.map(|g| g * c));
                }
                Op::AddConst(x) => accumulate(&mut grads, *x, dy.clone()),
                Op::Relu(x) => {
                    let dx = dy.zip_map(&node.value, |g, y| if y > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = dy.zip_map(&node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = dy.zip_map(&node.value, |g, y| g * y);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Log(x) => {
                    let dx = dy.zip_map(self.value(*x), |g, xv| g / xv);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softplus(x) => {
                    let dx = dy.zip_map(self.value(*x), |g, xv| g * kernels::sigmoid(xv));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Square(x) => {
                    let dx = dy.zip_map(self.value(*x), |g, xv| 2.0 * g * xv);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Minimum(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut da = dy.clone();
                    let mut db = dy.clone();
                    for i in 0..dy.len() {
                        if av.data()[i] <= bv.data()[i] {
                            db.data_mut()[i] = 0.0;
                        } else {
                            da.data_mut()[i] = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    let g = dy.item();
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), g));
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let g = dy.item() / xv.len() as f64;
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), g));
                }
                Op::SumCols(x) => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let data = (0..xv.len()).map(|i| dy.data()[i / cols]).collect();
                    accumulate(&mut grads, *x, Tensor::matrix(xv.rows(), cols, data));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut data = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            data.extend_from_slice(&dy.row_slice(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, p, Tensor::matrix(pv.rows(), w, data));
                        offset += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..dy.rows() {
                        for (c, g) in dy.row_slice(r).iter().enumerate() {
                            dx.set(r, start + c, *g);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::TakeRows(x, rows) => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut dx = Tensor::zeros(xv.rows(), cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            dx.data_mut()[r * cols + c] += dy.data()[i * cols + c];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (dx, dgain, dbias) =
                        kernels::layer_norm_backward(&dy, self.value(*gain), xhat, inv_std);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    tokens,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        &dy,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        *tokens,
                        *heads,
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
            }
            grads[idx] = Some(dy);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| (n.value.rows(), n.value.cols()))
            .collect();
        Gradients { grads, shapes }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
