use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter arrays. Order is creation order and
/// is what checkpoints and the optimizer iterate over.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform_range(-bound, bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("positive shape");
        self.add(name, t)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `graph` as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters the loss does not reach get zeros.
    pub fn collect_grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&store.tensors)
            .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
            .collect()
    }
}
