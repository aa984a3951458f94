//! Joint weight/structure search, the three pipelines, retraining, and the
//! uniform-scaling baseline.
//!
//! Pipelines:
//! - `np`: search a randomly initialized supernet, export, retrain from a
//!   fresh initialization.
//! - `p`: load pretrained supernet weights, search weights and structure,
//!   export, retrain from a fresh initialization.
//! - `p-`: load pretrained weights and optimize only the pruning ratios;
//!   the exported model keeps the pretrained weight slices and is not
//!   retrained.

mod checkpoint;
mod config;
mod optim;
mod pipeline;
mod train;

pub use checkpoint::{weight_digest, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Budget, Hyperparams, Pipeline, PipelineConfig, ResourceSpec};
pub use optim::Adam;
pub use pipeline::{
    evaluate_on, pretrain, reduced, retrain, run_pipeline, uniform_baseline, BaselineReport,
    PipelineOutcome, PipelineReport, Search, SearchState, Split, TARGET_SLACK,
};
pub use train::{evaluate, train_epoch, EpochRecord, EpochStats, EvalMetrics, Phase, TaskData};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::network::NetworkError;
use crate::resource::ResourceError;
use crate::topk::TopkError;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(
        "resource target missed: exported {exported} > {limit} (target {target}); final r_c = {r_c}"
    )]
    TargetMissed {
        exported: f64,
        limit: f64,
        target: f64,
        r_c: f64,
    },
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Topk(#[from] TopkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, SearchError>;

/// Projected gradient step on one pruning ratio:
/// `a ← clamp(a − lr·(g_task + λ_res·g_res), a_min, a_max)`.
///
/// Returns `None` (leaving `a` untouched) when a gradient is not finite.
pub fn structure_step(
    a: f64,
    g_task: f64,
    g_resource: f64,
    lr: f64,
    lambda_resource: f64,
    bounds: (f64, f64),
) -> Option<f64> {
    if !g_task.is_finite() || !g_resource.is_finite() {
        return None;
    }
    Some((a - lr * (g_task + lambda_resource * g_resource)).clamp(bounds.0, bounds.1))
}

#[cfg(test)]
mod tests;
