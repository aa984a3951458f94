use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::spec::{ModelSpec, ResourceKind};
use super::NetworkError;
use crate::topk::OperatorKind;

pub const ARCH_SCHEMA: &str = "dms-architecture/1";

/// Retained elements of one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimEntry {
    pub name: String,
    pub kind: OperatorKind,
    pub n_max: usize,
    pub k: usize,
    pub retained: Vec<usize>,
    /// Operator that decided this dimension; absent for fixed dimensions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A searched (or hand-picked) discrete architecture: per-dimension retained
/// sets plus the discrete model spec they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDescription {
    pub schema: String,
    pub entries: Vec<DimEntry>,
    pub model: ModelSpec,
    pub provenance: Provenance,
}

impl ArchitectureDescription {
    pub fn new(
        entries: Vec<DimEntry>,
        model: ModelSpec,
        provenance: Provenance,
    ) -> Result<Self, NetworkError> {
        let d = Self {
            schema: ARCH_SCHEMA.to_string(),
            entries,
            model,
            provenance,
        };
        d.validate()?;
        Ok(d)
    }

    /// Checks counts, index ranges, and group consistency.
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.schema != ARCH_SCHEMA {
            return Err(NetworkError::Invalid(format!(
                "architecture schema `{}` is not `{ARCH_SCHEMA}`",
                self.schema
            )));
        }
        let mut by_op: HashMap<&str, &Vec<usize>> = HashMap::new();
        for e in &self.entries {
            if e.k == 0 || e.k > e.n_max || e.k != e.retained.len() {
                return Err(NetworkError::Invalid(format!(
                    "`{}` retains {} of {} (listed {})",
                    e.name,
                    e.k,
                    e.n_max,
                    e.retained.len()
                )));
            }
            if e.retained.windows(2).any(|w| w[0] >= w[1])
                || e.retained.last().is_some_and(|&i| i >= e.n_max)
            {
                return Err(NetworkError::Invalid(format!(
                    "`{}` has unsorted or out-of-range indices",
                    e.name
                )));
            }
            if let Some(op) = &e.operator {
                if let Some(prev) = by_op.insert(op, &e.retained) {
                    if prev != &e.retained {
                        return Err(NetworkError::Invalid(format!(
                            "group `{op}` retains different sets across members"
                        )));
                    }
                }
            }
        }
        self.model.layout()?;
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&DimEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let d: Self =
            serde_json::from_str(text).map_err(|e| NetworkError::Invalid(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }
}

/// Exact per-sample MACs or parameters of a discrete architecture.
pub fn count_discrete_resource(
    desc: &ArchitectureDescription,
    kind: ResourceKind,
) -> Result<f64, NetworkError> {
    desc.model.count(kind)
}
