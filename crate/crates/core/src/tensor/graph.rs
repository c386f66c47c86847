use super::Tensor;
use crate::error::TensorError;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        padding: usize,
        stride: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride_h: usize,
        stride_w: usize,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StackScales(Vec<Var>),
    Reshape(Var),
    GradStopRows {
        x: Var,
        stopped: Vec<bool>,
    },
    /// Scalar loss whose gradient w.r.t. `input` was computed during the
    /// forward pass.
    Custom {
        input: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Reshape(a) => vec![*a],
            Op::SliceCols { x, .. } | Op::GradStopRows { x, .. } => vec![*x],
            Op::Custom { input, .. } => vec![*input],
            Op::Linear { x, w, b } | Op::Conv1d { x, w, b, .. } | Op::Conv2d { x, w, b, .. } => {
                vec![*x, *w, *b]
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(vs) | Op::StackScales(vs) => vs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Linear { .. } => "linear",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::StackScales(_) => "stack_scales",
            Op::Reshape(_) => "reshape",
            Op::GradStopRows { .. } => "grad_stop_rows",
            Op::Custom { .. } => "custom",
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Define-by-run tape. Build one per forward pass and drop it after
/// [`Graph::backward`].
#[derive(Debug)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Finite-value checks after every op are on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`. Every leaf created with
    /// `requires_grad` that the loss depends on gets a fully populated
    /// gradient; leaves the loss does not reach get `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                self.backward_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // Drop gradients of interior nodes; only leaves are part of the result.
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Returns the gradient buffer for `v`, allocating zeros on first touch, or
/// `None` if `v` does not require a gradient.
pub(crate) fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}
