use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{Result, SearchError};
use crate::data::TaskSpec;
use crate::network::{ModelSpec, OperatorOptions, ResourceKind};
use crate::resource::{fit_latency_model, LatencyTable, ResourceModel};
use crate::topk::DEFAULT_DECAY;

fn lambda_resource() -> f64 {
    1.0
}
fn lr_structure() -> f64 {
    5e-3
}
fn lr_weights() -> f64 {
    1e-3
}
fn decay() -> f64 {
    DEFAULT_DECAY
}
fn retrain_epochs() -> usize {
    100
}
fn batch_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "lambda_resource")]
    pub lambda_resource: f64,
    #[serde(default = "lr_structure")]
    pub lr_structure: f64,
    #[serde(default = "lr_weights")]
    pub lr_weights: f64,
    #[serde(default = "decay")]
    pub decay: f64,
    /// Defaults to a tenth of `retrain_epochs` (at least one).
    #[serde(default)]
    pub search_epochs: Option<usize>,
    /// Depth-frozen tail of the search; defaults to a fifth of it.
    #[serde(default)]
    pub width_only_epochs: Option<usize>,
    #[serde(default = "retrain_epochs")]
    pub retrain_epochs: usize,
    #[serde(default = "batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl Hyperparams {
    /// Copy with every derived default written out.
    pub fn resolved(&self) -> Self {
        let search = self
            .search_epochs
            .unwrap_or_else(|| (self.retrain_epochs / 10).max(1));
        let width_only = self.width_only_epochs.unwrap_or(search / 5);
        Self {
            search_epochs: Some(search),
            width_only_epochs: Some(width_only),
            ..self.clone()
        }
    }

    pub fn search_epochs(&self) -> usize {
        self.resolved().search_epochs.unwrap()
    }

    pub fn width_only_epochs(&self) -> usize {
        self.resolved().width_only_epochs.unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_resource", self.lambda_resource),
            ("lr_structure", self.lr_structure),
            ("lr_weights", self.lr_weights),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SearchError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(SearchError::Config(format!(
                "decay must lie in (0, 1), got {}",
                self.decay
            )));
        }
        if self.batch_size == 0 {
            return Err(SearchError::Config("batch_size must be positive".into()));
        }
        if self.width_only_epochs() > self.search_epochs() {
            return Err(SearchError::Config(format!(
                "width_only_epochs {} exceeds search_epochs {}",
                self.width_only_epochs(),
                self.search_epochs()
            )));
        }
        Ok(())
    }
}

/// Final resource target, absolute or as a fraction of the supernet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Budget {
    Fraction(f64),
    Absolute(f64),
}

impl Budget {
    pub fn resolve(&self, r_supernet: f64) -> Result<f64> {
        let r = match *self {
            Budget::Fraction(f) if f > 0.0 && f < 1.0 => f * r_supernet,
            Budget::Fraction(f) => {
                return Err(SearchError::Config(format!(
                    "budget fraction {f} must lie in (0, 1)"
                )))
            }
            Budget::Absolute(v) => v,
        };
        if !(r > 0.0 && r < r_supernet) {
            return Err(SearchError::Config(format!(
                "budget {r} must be positive and below the supernet's {r_supernet}"
            )));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSpec {
    pub kind: ResourceKind,
    pub target: Budget,
    /// Measured latencies; required for the latency kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_table: Option<PathBuf>,
}

impl ResourceSpec {
    pub fn model(&self) -> Result<ResourceModel> {
        match (self.kind, &self.latency_table) {
            (ResourceKind::Macs, None) => Ok(ResourceModel::Macs),
            (ResourceKind::Params, None) => Ok(ResourceModel::Params),
            (ResourceKind::Latency, Some(path)) => {
                let table = LatencyTable::from_path(path)?;
                Ok(ResourceModel::Latency(fit_latency_model(&table)?))
            }
            (ResourceKind::Latency, None) => Err(SearchError::Config(
                "resource.latency_table is required for the latency kind".into(),
            )),
            (kind, Some(_)) => Err(SearchError::Config(format!(
                "resource.latency_table only applies to latency, not {kind}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pipeline {
    #[serde(rename = "np")]
    Np,
    #[serde(rename = "p")]
    P,
    #[serde(rename = "p-")]
    PMinus,
}

impl std::fmt::Display for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pipeline::Np => "np",
            Pipeline::P => "p",
            Pipeline::PMinus => "p-",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: Pipeline,
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub resource: ResourceSpec,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub operators: OperatorOptions,
    /// Pretrained supernet weights for `p` and `p-`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Also retrain a uniformly scaled model at the same budget.
    #[serde(default)]
    pub compare_baseline: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.model.layout()?;
        match (self.pipeline, &self.checkpoint) {
            (Pipeline::Np, Some(_)) => Err(SearchError::Config(
                "pipeline np searches from random initialization and takes no checkpoint".into(),
            )),
            (Pipeline::P | Pipeline::PMinus, None) => Err(SearchError::Config(format!(
                "pipeline {} needs a pretrained checkpoint",
                self.pipeline
            ))),
            _ => Ok(()),
        }
    }

    /// Copy with hyperparameter defaults written out.
    pub fn resolved(&self) -> Self {
        Self {
            hyperparams: self.hyperparams.resolved(),
            ..self.clone()
        }
    }
}
