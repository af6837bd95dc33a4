//! Named parameter tensors with their Adam state.

use std::ops::Index;

use rand::Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters in insertion order plus first/second Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

/// Graph handles for every parameter of one store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps leaves that were registered by hand, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let (r, c) = (value.rows(), value.cols());
        self.names.push(name.into());
        self.values.push(value);
        self.m.push(Tensor::zeros(r, c));
        self.v.push(Tensor::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Number of Adam updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|t| g.input(t.clone())).collect())
    }

    /// Per-parameter gradients; parameters the loss never touched get zeros.
    pub fn collect_grads(&self, grads: &Gradients, bound: &Bound) -> Vec<Tensor> {
        bound.0.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    /// One bias-corrected Adam update. Rejects the whole update, leaving the
    /// store untouched, if any gradient entry is not finite.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<(), NnError> {
        assert_eq!(grads.len(), self.values.len(), "one gradient per parameter");
        for (i, g) in grads.iter().enumerate() {
            assert_eq!(g.shape(), self.values[i].shape(), "gradient shape for `{}`", self.names[i]);
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient {
                    name: self.names[i].clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = self.values[i].data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Polyak averaging: `self <- tau * src + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, src: &ParamStore, tau: f64) {
        assert_eq!(self.len(), src.len(), "soft update between different layouts");
        for (dst, s) in self.values.iter_mut().zip(&src.values) {
            assert_eq!(dst.shape(), s.shape());
            for (d, x) in dst.data_mut().iter_mut().zip(s.data()) {
                *d = tau * x + (1.0 - tau) * *d;
            }
        }
    }

    /// Copy of the parameter values only (fresh optimizer state).
    pub fn clone_values(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            out.add(n.clone(), v.clone());
        }
        out
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (format!("{prefix}{n}"), v.clone()))
            .collect()
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)], prefix: &str) -> Result<(), NnError> {
        for i in 0..self.values.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter `{key}`")))?;
            if t.shape() != self.values[i].shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter `{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}
