//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass: leaves are recorded with
//! [`Graph::param`] or [`Graph::constant`], every primitive appends one node,
//! and [`Graph::backward`] sweeps the tape in reverse insertion order. The
//! graph is dropped once the gradients have been read.
//!
//! ```
//! use dms::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let root = g.sum(sq).unwrap();
//! let grads = g.backward(root).unwrap();
//! assert_eq!(grads.scalar(x), 6.0);
//! ```
//!
//! Binary elementwise ops broadcast only by expanding size-1 axes between
//! operands of equal rank; that covers every mask-times-activation pattern
//! the searchable layers need.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{central_difference, grad_check, relative_error, DEFAULT_EPSILON};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("slice {start}..{end} on axis {axis} of shape {shape:?}")]
    BadSlice {
        shape: Vec<usize>,
        axis: usize,
        start: usize,
        end: usize,
    },
    #[error("permutation {perm:?} does not match rank of {shape:?}")]
    BadPermutation { shape: Vec<usize>, perm: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("finite-difference epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("non-finite function value")]
    NonFinite,
}
