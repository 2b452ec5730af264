//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Tape`] records every operation as it is executed. Parameters enter as
//! leaves created with [`Tape::param`]; constants with [`Tape::constant`].
//! [`Tape::backward`] consumes the tape, walks it in reverse and returns the
//! accumulated [`Gradients`] of every parameter leaf.
//!
//! ```
//! use domainsim_core::autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let f = tape.sum(sq).unwrap();
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod backward;
mod check;
pub(crate) mod kernels;
mod ops;

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

pub use backward::Gradients;
pub use check::{grad_check, relative_error, GradCheckReport, ParamCheck};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Logit assigned to masked-out attention keys.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("tensor shape {shape:?} needs {expected} values, got {actual}")]
    BadBuffer { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("axis {axis} is invalid for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("dropout probability {0} not in [0, 1)")]
    BadDropout(f64),
}

/// Dense row-major tensor of 64-bit floats. Clones share the buffer until
/// one of them is written.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutogradError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutogradError::BadBuffer { shape, expected, actual: data.len() });
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(alloc::vec![0.0; n]) }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(alloc::vec![value; n]) }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: Arc::new(alloc::vec![value]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape.last().copied().unwrap_or(1);
        &self.data[i * w..(i + 1) * w]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    GatherRows { table: usize, rows: Vec<usize> },
    MaskedFill { x: usize, mask: Vec<bool> },
    Softmax { x: usize, outer: usize, n: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: usize },
    Tanh { x: usize },
    Sum { x: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 3] {
        match *self {
            Op::Leaf => [None, None, None],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                [Some(a), Some(b), None]
            }
            Op::AddBias { x, bias } => [Some(x), Some(bias), None],
            Op::LayerNorm { x, gain, bias, .. } => [Some(x), Some(gain), Some(bias)],
            Op::GatherRows { table, .. } => [Some(table), None, None],
            Op::CrossEntropy { logits, .. } => [Some(logits), None, None],
            Op::Scale { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::MaskedFill { x, .. }
            | Op::Softmax { x, .. }
            | Op::Gelu { x }
            | Op::Tanh { x }
            | Op::Sum { x } => [Some(x), None, None],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(1);

/// Ordered record of a forward computation.
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<usize, AutogradError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(AutogradError::ForeignVar);
        }
        Ok(v.idx)
    }

    /// For a leaf, marks which of its coordinates any recorded operation
    /// reads. Row gathers read only their rows; every other consumer reads
    /// the whole tensor.
    pub fn read_mask(&self, leaf: Var) -> Result<Vec<bool>, AutogradError> {
        let idx = self.check(leaf)?;
        let value = &self.nodes[idx].value;
        let mut mask = alloc::vec![false; value.numel()];
        let width = value.shape().last().copied().unwrap_or(1);
        for node in &self.nodes[idx + 1..] {
            match &node.op {
                Op::GatherRows { table, rows } if *table == idx => {
                    for &r in rows {
                        mask[r * width..(r + 1) * width].iter_mut().for_each(|m| *m = true);
                    }
                }
                op => {
                    if op.inputs().iter().flatten().any(|&i| i == idx) {
                        mask.iter_mut().for_each(|m| *m = true);
                        break;
                    }
                }
            }
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests;
