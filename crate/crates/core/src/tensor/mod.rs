//! Dense tensors, a reverse-mode differentiation tape, and the
//! finite-difference verification harness.
//!
//! The design splits state three ways:
//!
//! - [`ParamSet`] owns trainable values and their gradient accumulators,
//!   keyed by name for checkpointing. It is a plain struct: `Send` when the
//!   scalar type is, so parameter state can move between threads between
//!   optimization steps.
//! - [`Graph`] is a per-step tape. Nodes are appended in topological order
//!   during the forward pass; [`Graph::backward`] walks them in reverse and
//!   accumulates into the owning `ParamSet`.
//! - [`gradient_check`] rebuilds the graph under coordinate perturbations
//!   and compares central finite differences against the reverse-mode
//!   result.
//!
//! All verification runs in `f64`; training may instantiate everything at
//! `f32` for throughput.

mod gradcheck;
mod graph;
mod param;

use std::fmt;

use thiserror::Error;

pub use gradcheck::{gradient_check, GradCheckReport, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
pub use graph::{Graph, NodeId};
pub use param::{ParamId, ParamSet};

/// Scalar type the engine is generic over. `f64` for verification,
/// `f32` for training throughput.
pub trait Real:
    num_traits::Float
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Row-major 2-D extent. Vectors are `1 x n` rows, scalars `1 x 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn vector(n: usize) -> Self {
        Self { rows: 1, cols: n }
    }

    pub fn scalar() -> Self {
        Self { rows: 1, cols: 1 }
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Owned tensor data, the carrier between graph runs and the outside world.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Shape,
    pub values: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, values: Vec<T>) -> Result<Self, TensorError> {
        if values.len() != shape.count() {
            return Err(TensorError::ValueCountMismatch {
                shape,
                got: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn vector(values: Vec<T>) -> Self {
        Self {
            shape: Shape::vector(values.len()),
            values,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: expected {want}, got shape {got}")]
    BadShape {
        op: &'static str,
        want: &'static str,
        got: Shape,
    },
    #[error("shape {shape} holds {} values but {got} were provided", shape.count())]
    ValueCountMismatch { shape: Shape, got: usize },
    #[error("loss must be a scalar, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("{op}: row index {index} out of range for {rows} rows")]
    RowIndexOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: column range {start}..{end} invalid for {cols} columns")]
    BadColumnRange {
        op: &'static str,
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParamName(String),
    #[error("target index {index} out of range for {len} logits")]
    TargetOutOfRange { index: usize, len: usize },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    BadDropoutRate(f64),
    #[error("cosine similarity of a zero-norm input")]
    ZeroNorm,
}
