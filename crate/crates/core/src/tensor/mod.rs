//! Dense row-major tensors and the reverse-mode tape that differentiates
//! programs built from them.

pub mod gradcheck;
mod kernels;
mod tape;

pub use tape::{Gradients, NodeId, Tape};

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("matmul shape mismatch: {left:?} x {right:?}")]
    MatmulMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("broadcast mismatch: {left:?} vs {right:?}")]
    BroadcastMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("element count mismatch: shape {shape:?} holds {expected} values, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Mismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("convolution kernel width must be odd, got {width}")]
    EvenKernel { width: usize },
    #[error("rank {rank} too low, operation needs at least rank {min}")]
    RankTooLow { rank: usize, min: usize },
    #[error("concat needs at least one input")]
    EmptyConcat,
    #[error("loss must be a tracked scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is not recorded on this tape")]
    UntrackedLoss,
}

/// Value-semantic dense tensor.
///
/// Data is shared behind an `Arc`, so clones are cheap and tensors are safe
/// to move across threads. A tensor optionally carries the id of the tape
/// node that produced it; constants have none and contribute no gradient.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<[S]>,
    node: Option<NodeId>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: data.into(),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n].into(),
            node: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value].into(),
            node: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self {
            shape: vec![n, n],
            data: data.into(),
            node: None,
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self, ShapeError> {
        Self::from_vec(shape.to_vec(), values.iter().map(|&v| S::lit(v)).collect())
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of the single element of a scalar tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() needs exactly one element");
        self.data[0]
    }

    /// Element at a full multi-index.
    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (d, (&i, &n)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < n, "index {i} out of bounds for axis {d} of size {n}");
            off = off * n + i;
        }
        self.data[off]
    }

    /// Same values, no tape node: gradients stop here.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<[S]>, node: Option<NodeId>) -> Self {
        Self { shape, data, node }
    }

    pub(crate) fn data_arc(&self) -> Arc<[S]> {
        Arc::clone(&self.data)
    }
}
