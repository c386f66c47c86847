//! Dense row-major arrays and a define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter it as
//! leaves, every op appends one node, and [`Graph::backward`] walks the tape
//! in reverse creation order, which is a valid topological order because a
//! node can only reference nodes created before it.

mod graph;
mod ops;

pub use graph::{Gradients, Graph, Var};
pub use ops::logsumexp;

use crate::error::TensorError;

/// An n-dimensional array of `f64` values stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::shape(
                "tensor",
                format!("dimension sizes must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::shape("from_rows", "ragged rows"));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Rows `start..end` of a 2-D tensor as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        if self.shape.len() != 2 || start >= end || end > self.shape[0] {
            return Err(TensorError::shape(
                "slice_rows",
                format!("rows {start}..{end} of shape {:?}", self.shape),
            ));
        }
        let c = self.shape[1];
        Self::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
