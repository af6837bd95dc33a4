//! Parameterized building blocks. Each layer only stores [`ParamId`]s; the
//! tensors live in a [`ParamStore`] and are bound into a [`Graph`] per pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot_uniform(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p[self.w]);
        g.add_bias(y, p[self.b])
    }
}

/// Stack of dense layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths = [input, hidden.., output]`; `widths.len() - 1` layers.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i < last {
                h = self.activation.apply(g, h);
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(1, width, 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, width));
        Self {
            gain,
            bias,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gain], p[self.bias], self.eps)
    }
}

/// Multi-head self-attention: `heads` independent scaled dot-product
/// attentions over column splits of the Q/K/V projections, concatenated and
/// mixed by an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must split evenly across heads");
        Self {
            query: Dense::new(store, &format!("{name}.q"), width, width, rng),
            key: Dense::new(store, &format!("{name}.k"), width, width, rng),
            value: Dense::new(store, &format!("{name}.v"), width, width, rng),
            output: Dense::new(store, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }

    /// Returns `(output, attention node)`; the attention node exposes the
    /// probabilities through [`Graph::attention_scores`].
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, tokens: usize) -> (Var, Var) {
        let q = self.query.forward(g, p, x);
        let k = self.key.forward(g, p, x);
        let v = self.value.forward(g, p, x);
        let att = g.attention(q, k, v, tokens, self.heads);
        (self.output.forward(g, p, att), att)
    }
}
