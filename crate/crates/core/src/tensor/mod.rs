//! Dense `f64` tensors with a reverse-mode differentiation tape.
//!
//! Tensors are immutable values. Every differentiable operation goes through a
//! [`Tape`], which records a node when at least one input is tracked and
//! recording is enabled. [`Tape::backward`] replays the recorded nodes in
//! reverse to produce [`Gradients`] for every leaf.

mod finite_diff;
mod kernels;
mod params;
mod tape;

pub use finite_diff::{central_difference, finite_diff_coords, finite_diff_grad};
pub use kernels::{sigmoid as sigmoid_scalar, Primitive};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, LeafKey, NoGradGuard, Tape};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("tensor data has {len} values but shape {shape:?} needs {expected}")]
    DataLength { shape: Vec<usize>, len: usize, expected: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor belongs to a different tape")]
    ForeignTape,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Position of a recorded node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub index: usize,
}

/// A dense row-major tensor of `f64` values.
///
/// `node` is `None` for constants and detached values; such tensors never
/// receive or contribute gradient.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len(), expected });
        }
        Ok(Self { shape, data: Arc::new(data), node: None })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: Arc::new(vec![value]), node: None }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: Arc::new(vec![0.0; n]), node: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: Arc::new(vec![value; n]), node: None }
    }

    /// 1-D tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data: Arc::new(data), node: None }
    }

    /// 2-D tensor from row slices. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid { op: "from_rows", reason: "ragged rows".into() });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        Self { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element at a 2-D index.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Whether this tensor is recorded on a tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape node. Gradients do not flow through the result.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened values.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality; tape identity is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, len: 5, .. }));
    }

    #[test]
    fn detach_preserves_values_and_is_idempotent() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let d = x.detach();
        assert_eq!(d.data(), x.data());
        assert!(!d.is_tracked());
        let dd = d.detach();
        assert_eq!(dd, d);
        assert!(!dd.is_tracked());
    }
}
