//! Differentiable top-k: rank-normalized importance, a sigmoid soft mask
//! thresholded by a learnable pruning ratio, and Taylor importance tracked
//! by exponential moving average.
//!
//! The pruning ratio `a` lives in `[0, 1]`: `a = 0` keeps every element and
//! the number of retained elements is `round((1 - a) * N)`. Elements are
//! grouped into units of `group_size` contiguous elements that share one
//! importance value and one mask value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, Graph, Tensor, Var};

pub const DEFAULT_DECAY: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopkError {
    #[error("importance sequence is empty")]
    Empty,
    #[error("importance value {value} at unit {index} is not finite")]
    NonFinite { index: usize, value: f64 },
    #[error("index importance is static and cannot be updated")]
    StaticImportance,
    #[error("expected {expected} unit values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("operator `{name}`: {reason}")]
    Invalid { name: String, reason: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// What a searchable dimension counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Width,
    Depth,
    Heads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    #[default]
    Taylor,
    /// Static importance that strictly decreases with unit index.
    Index,
}

/// How raw importance is mapped before thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Rank divided by unit count.
    #[default]
    Rank,
    /// Raw importance used as-is. Only useful as an ablation.
    Identity,
}

/// Maps importance to evenly spaced values: `c'_i = rank(c_i) / U` where ties
/// rank the lower index as smaller. The result is a permutation of
/// `{0, 1/U, ..., (U-1)/U}`.
pub fn normalize_importance(c: &[f64]) -> Result<Vec<f64>, TopkError> {
    let order = rank_order(c)?;
    let u = c.len() as f64;
    let mut out = vec![0.0; c.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank as f64 / u;
    }
    Ok(out)
}

/// Unit indices sorted from least to most important.
fn rank_order(c: &[f64]) -> Result<Vec<usize>, TopkError> {
    if c.is_empty() {
        return Err(TopkError::Empty);
    }
    if let Some((index, &value)) = c.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(TopkError::NonFinite { index, value });
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&i, &j| c[i].total_cmp(&c[j]).then(i.cmp(&j)));
    Ok(order)
}

/// `∂m_i/∂a = -λ (1 - m_i) m_i` for each mask value.
pub fn mask_grad_wrt_a(mask: &[f64], lambda: f64) -> Vec<f64> {
    mask.iter().map(|&m| -lambda * (1.0 - m) * m).collect()
}

/// One learnable pruning ratio with its importance accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkOperator {
    pub name: String,
    pub kind: OperatorKind,
    /// Element count of the dimension.
    pub n: usize,
    pub group_size: usize,
    pub a: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub lambda: f64,
    /// One entry per unit.
    pub importance: Vec<f64>,
    pub decay: f64,
    pub metric: ImportanceMetric,
    pub normalization: Normalization,
}

impl TopkOperator {
    /// Builds an operator over `n` elements. `min_size`, when given, bounds
    /// the retained count from below through `a_max = 1 - min/n`.
    pub fn new(
        name: impl Into<String>,
        kind: OperatorKind,
        n: usize,
        group_size: usize,
        min_size: Option<usize>,
    ) -> Result<Self, TopkError> {
        let name = name.into();
        let invalid = |reason: String| TopkError::Invalid {
            name: name.clone(),
            reason,
        };
        if n == 0 {
            return Err(invalid("element count must be positive".into()));
        }
        if group_size == 0 || group_size > n {
            return Err(invalid(format!("step {group_size} outside [1, {n}]")));
        }
        let a_max = match min_size {
            Some(0) => 1.0,
            Some(min) if min > n => {
                return Err(invalid(format!("minimum size {min} exceeds {n}")));
            }
            Some(min) => 1.0 - min as f64 / n as f64,
            None => 1.0,
        };
        let units = n.div_ceil(group_size);
        let lambda = match kind {
            OperatorKind::Width => units as f64,
            OperatorKind::Depth | OperatorKind::Heads => 4.0 * units as f64,
        };
        Ok(Self {
            name,
            kind,
            n,
            group_size,
            a: 0.0,
            a_min: 0.0,
            a_max,
            lambda,
            importance: vec![0.0; units],
            decay: DEFAULT_DECAY,
            metric: ImportanceMetric::Taylor,
            normalization: Normalization::Rank,
        })
    }

    /// Switches the importance metric, resetting the accumulator.
    pub fn with_metric(mut self, metric: ImportanceMetric) -> Self {
        self.metric = metric;
        let u = self.units();
        self.importance = match metric {
            ImportanceMetric::Taylor => vec![0.0; u],
            ImportanceMetric::Index => (0..u).map(|i| (u - i) as f64).collect(),
        };
        self
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn units(&self) -> usize {
        self.importance.len()
    }

    /// Element range covered by `unit`.
    pub fn unit_members(&self, unit: usize) -> std::ops::Range<usize> {
        let start = unit * self.group_size;
        start..(start + self.group_size).min(self.n)
    }

    /// Importance after the configured normalization.
    pub fn normalized_importance(&self) -> Result<Vec<f64>, TopkError> {
        match self.normalization {
            Normalization::Rank => normalize_importance(&self.importance),
            Normalization::Identity => {
                rank_order(&self.importance)?;
                Ok(self.importance.clone())
            }
        }
    }

    /// Per-unit soft mask `σ(λ(c'_i - a))`.
    pub fn unit_mask(&self) -> Result<Vec<f64>, TopkError> {
        let c = self.normalized_importance()?;
        Ok(c.iter().map(|&ci| sigmoid(self.lambda * (ci - self.a))).collect())
    }

    /// Per-element soft mask: the unit mask replicated over each unit.
    pub fn soft_mask(&self) -> Result<Vec<f64>, TopkError> {
        Ok(self.expand(&self.unit_mask()?))
    }

    /// Replicates per-unit values onto elements.
    pub fn expand(&self, unit_values: &[f64]) -> Vec<f64> {
        (0..self.n).map(|e| unit_values[e / self.group_size]).collect()
    }

    /// Records the per-unit soft mask on `g` as a `[U]` node driven by the
    /// leaf `a` (shape `[1]`). Normalized importance enters as a constant.
    pub fn unit_mask_var(&self, g: &mut Graph, a: Var) -> Result<Var, TopkError> {
        let c = g.constant(Tensor::vector(self.normalized_importance()?));
        let diff = g.sub(c, a)?;
        let z = g.scale(diff, self.lambda)?;
        Ok(g.sigmoid(z)?)
    }

    /// Expands a `[U]` unit mask node to a `[1, N]` element mask node.
    pub fn element_mask_var(&self, g: &mut Graph, unit_mask: Var) -> Result<Var, TopkError> {
        let u = self.units();
        let row = g.reshape(unit_mask, &[1, u])?;
        if self.group_size == 1 {
            return Ok(row);
        }
        let mut expand = vec![0.0; u * self.n];
        for e in 0..self.n {
            expand[(e / self.group_size) * self.n + e] = 1.0;
        }
        let expand = g.constant(Tensor::new(vec![u, self.n], expand)?);
        Ok(g.matmul(row, expand)?)
    }

    /// Moving-average Taylor update `c ← c·decay + (m·g)²·(1 - decay)`, where
    /// `unit_grad` is the task-loss gradient of each unit's mask.
    pub fn update_importance(
        &mut self,
        unit_mask: &[f64],
        unit_grad: &[f64],
    ) -> Result<(), TopkError> {
        if self.metric == ImportanceMetric::Index {
            return Err(TopkError::StaticImportance);
        }
        let u = self.units();
        for len in [unit_mask.len(), unit_grad.len()] {
            if len != u {
                return Err(TopkError::LengthMismatch {
                    expected: u,
                    got: len,
                });
            }
        }
        for ((c, &m), &g) in self.importance.iter_mut().zip(unit_mask).zip(unit_grad) {
            let s = m * g;
            *c = *c * self.decay + s * s * (1.0 - self.decay);
        }
        Ok(())
    }

    /// Projects `a` back into `[a_min, a_max]`.
    pub fn clamp_a(&mut self) {
        self.a = self.a.clamp(self.a_min, self.a_max);
    }

    /// Retained element count `round((1 - a) N)` (ties to even), snapped down
    /// to a whole number of units and kept within `[group_size, N]`.
    pub fn element_count(&self) -> usize {
        let raw = ((1.0 - self.a) * self.n as f64).round_ties_even();
        let k = if raw <= 0.0 { 0 } else { raw as usize };
        if k >= self.n {
            return self.n;
        }
        let snapped = k - k % self.group_size;
        snapped.max(self.group_size).min(self.n)
    }

    /// Units sorted from least to most important under the same tie rule as
    /// the normalization.
    pub fn rank_order(&self) -> Result<Vec<usize>, TopkError> {
        rank_order(&self.importance)
    }

    /// Element indices of the `element_count()` most important elements,
    /// ascending.
    pub fn retained_indices(&self) -> Result<Vec<usize>, TopkError> {
        let units = self.element_count().div_ceil(self.group_size);
        let order = self.rank_order()?;
        let mut kept: Vec<usize> = order[order.len() - units..]
            .iter()
            .flat_map(|&u| self.unit_members(u))
            .collect();
        kept.sort_unstable();
        Ok(kept)
    }

    /// Number of units whose mask lies strictly inside `(0.05, 0.95)`.
    pub fn fuzzy_units(&self) -> Result<usize, TopkError> {
        Ok(self
            .unit_mask()?
            .iter()
            .filter(|&&m| m > 0.05 && m < 0.95)
            .count())
    }
}
