//! Parameterized layers shared by the pipeline stages. Each layer only holds
//! [`ParamId`]s; values live in a [`ParamStore`] and are bound to a graph
//! per forward pass.

use crate::error::TensorError;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[c_in, c_out], c_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[c_out], c_in, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), &[c], 1.0),
            beta: store.add_filled(format!("{name}.beta"), &[c], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}
