//! Searchable model zoo: linear layers, residual stages, and attention
//! blocks gated by top-k masks, plus export to discrete architectures.
//!
//! Masks multiply layer *inputs*. A residual block computes
//! `x ← m_C·x + m_L·f(m_C·x)` where `m_C` gates the stream features and `m_L`
//! is the block's depth mask; attention gates `Q`, `K`, `V` after projection
//! with per-head-dim and per-head masks.

mod arch;
mod model;
mod spec;

pub use arch::{count_discrete_resource, ArchitectureDescription, DimEntry, Provenance, ARCH_SCHEMA};
pub use model::{Bound, MaskSource, Network, OperatorOptions};
pub use spec::{
    Activation, CostTerm, DimInfo, DimSearch, LayerDims, LayerSpec, Layout, ModelSpec,
    ResourceKind, Widths,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::topk::TopkError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("dimension `{0}` has zero size")]
    ZeroSize(String),
    #[error("duplicate dimension name `{0}`")]
    DuplicateName(String),
    #[error("unknown dimension `{0}`")]
    UnknownDim(String),
    #[error("group members `{first}` (N={first_size}) and `{member}` (N={size}) differ in size")]
    GroupSizeMismatch {
        first: String,
        first_size: usize,
        member: String,
        size: usize,
    },
    #[error("{0} is measured, not counted")]
    NotCountable(ResourceKind),
    #[error("input shape {got:?} does not match (rows of {expected:?})")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Topk(#[from] TopkError),
}
