use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{structure_step, Adam, Hyperparams, Result, SearchError};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{Dataset, OutputKind, Split, Targets};
use crate::network::{MaskSource, Network};
use crate::resource::{current_consumption, resource_loss, ResourceModel};
use crate::topk::{ImportanceMetric, OperatorKind};

/// Which parameters an epoch updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Weights and every pruning ratio.
    Joint,
    /// Weights and width ratios; depth ratios and importances frozen.
    WidthOnly,
    /// Weights only, with every mask at one.
    WeightsOnly,
    /// Pruning ratios only; weights untouched.
    StructureOnly,
    /// Width ratios only.
    StructureWidthOnly,
}

impl Phase {
    pub fn trains_weights(self) -> bool {
        matches!(self, Phase::Joint | Phase::WidthOnly | Phase::WeightsOnly)
    }

    pub fn trains_structure(self) -> bool {
        !matches!(self, Phase::WeightsOnly)
    }

    pub fn trains_depth(self) -> bool {
        matches!(self, Phase::Joint | Phase::StructureOnly)
    }
}

/// Aggregates of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub task_loss: f64,
    pub resource_loss: f64,
    pub batches: usize,
    pub skipped_steps: usize,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub phase: Option<Phase>,
    pub task_loss: Option<f64>,
    pub resource_loss: Option<f64>,
    pub r_c: Option<f64>,
    pub r_t: Option<f64>,
    pub a: BTreeMap<String, f64>,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Cross-entropy or mean squared error.
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Dataset checked against a model's input and output shapes.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub data: &'a Dataset,
    seq_len: usize,
    input_dim: usize,
}

impl<'a> TaskData<'a> {
    pub fn new(net: &Network, data: &'a Dataset) -> Result<Self> {
        let spec = net.spec();
        let per_sample = spec.input_dim * spec.seq_len;
        if data.input_dim() != per_sample {
            return Err(SearchError::Config(format!(
                "task samples have {} features; the model expects {} ({} tokens of {})",
                data.input_dim(),
                per_sample,
                spec.seq_len,
                spec.input_dim
            )));
        }
        let out = spec.output_features()?;
        if out != data.output.width() {
            return Err(SearchError::Config(format!(
                "model produces {out} outputs; the task needs {}",
                data.output.width()
            )));
        }
        Ok(Self {
            data,
            seq_len: spec.seq_len,
            input_dim: spec.input_dim,
        })
    }

    /// `(batch * seq_len, input_dim)` inputs for the chosen samples.
    fn inputs(&self, split: &Split, idx: &[usize]) -> Result<Tensor> {
        let mut x = Vec::with_capacity(idx.len() * split.cols);
        for &i in idx {
            x.extend_from_slice(&split.x[i * split.cols..(i + 1) * split.cols]);
        }
        Ok(Tensor::new(vec![idx.len() * self.seq_len, self.input_dim], x)
            .map_err(crate::network::NetworkError::from)?)
    }
}

fn task_loss(g: &mut Graph, y: Var, targets: &Targets, idx: &[usize]) -> Result<Var> {
    match targets {
        Targets::Classes(c) => {
            let labels: Vec<usize> = idx.iter().map(|&i| c[i]).collect();
            Ok(g.softmax_cross_entropy(y, &labels)?)
        }
        Targets::Values { dim, data } => {
            let mut t = Vec::with_capacity(idx.len() * dim);
            for &i in idx {
                t.extend_from_slice(&data[i * dim..(i + 1) * dim]);
            }
            let t = g.constant(Tensor::new(vec![idx.len(), *dim], t)?);
            let d = g.sub(y, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean(sq)?)
        }
    }
}

fn masks_for(net: &Network, phase: Phase) -> MaskSource<'static> {
    if net.operators.is_empty() || phase.trains_structure() {
        MaskSource::Soft
    } else {
        MaskSource::Ones
    }
}

/// One pass over `task`'s training split in a seeded random order.
///
/// Per batch: masked forward, task loss, resource loss against `r_t`, one
/// backward pass from each; Adam on the weights from the task gradient;
/// Taylor importance from the task gradient of each unit mask; then a
/// projected step on every trainable pruning ratio.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    net: &mut Network,
    adam: &mut Adam,
    task: &TaskData<'_>,
    rm: Option<&ResourceModel>,
    r_t: f64,
    hp: &Hyperparams,
    phase: Phase,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochStats> {
    let split = &task.data.train;
    let structure = phase.trains_structure() && !net.operators.is_empty();
    if structure && rm.is_none() {
        return Err(SearchError::Config("structure phases need a resource model".into()));
    }
    let mut order: Vec<usize> = (0..split.rows()).collect();
    order.shuffle(rng);
    let masks = masks_for(net, phase);

    let mut stats = EpochStats {
        task_loss: 0.0,
        resource_loss: 0.0,
        batches: 0,
        skipped_steps: 0,
    };
    let mut seen = 0usize;
    for (b, idx) in order.chunks(hp.batch_size).enumerate() {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, phase.trains_weights(), masks)?;
        let x = g.constant(task.inputs(split, idx)?);
        let y = net.forward(&mut g, &bound, x)?;
        let loss = task_loss(&mut g, y, &split.y, idx)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            let a: Vec<String> = net
                .operators
                .iter()
                .map(|o| format!("{}={}", o.name, o.a))
                .collect();
            return Err(SearchError::Divergence {
                epoch,
                batch: b,
                detail: format!("task loss {loss_value}; a: [{}]", a.join(", ")),
            });
        }
        let task_grads = g.backward(loss)?;

        let mut res_value = 0.0;
        let res_grads = if structure {
            let rc = current_consumption(&mut g, net, &bound, rm.unwrap())?;
            let rl = resource_loss(&mut g, rc, r_t)?;
            res_value = g.value(rl).item();
            if res_value > 0.0 {
                Some(g.backward(rl)?)
            } else {
                None
            }
        } else {
            None
        };

        if phase.trains_weights() {
            let grads: Vec<Vec<f64>> = bound
                .params
                .iter()
                .zip(net.params())
                .map(|(&v, t)| task_grads.values_or_zero(v, t.numel()))
                .collect();
            adam.step(net.params_mut(), &grads);
        }

        if structure {
            for (i, op) in net.operators.iter_mut().enumerate() {
                if op.kind == OperatorKind::Depth && !phase.trains_depth() {
                    continue;
                }
                if op.metric == ImportanceMetric::Taylor {
                    let m = g.value(bound.unit_masks[i]).data().to_vec();
                    let gm = task_grads.values_or_zero(bound.unit_masks[i], m.len());
                    if gm.iter().all(|v| v.is_finite()) {
                        op.update_importance(&m, &gm)?;
                    }
                }
                let g_task = task_grads.scalar(bound.a[i]);
                let g_res = res_grads.as_ref().map_or(0.0, |r| r.scalar(bound.a[i]));
                match structure_step(
                    op.a,
                    g_task,
                    g_res,
                    hp.lr_structure,
                    hp.lambda_resource,
                    (op.a_min, op.a_max),
                ) {
                    Some(a) => op.a = a,
                    None => {
                        warn!(
                            "epoch {epoch} batch {b}: non-finite gradient for `{}` \
                             (task {g_task}, resource {g_res}); step skipped",
                            op.name
                        );
                        stats.skipped_steps += 1;
                    }
                }
            }
        }

        stats.task_loss += loss_value * idx.len() as f64;
        stats.resource_loss += res_value * idx.len() as f64;
        stats.batches += 1;
        seen += idx.len();
    }
    if seen > 0 {
        stats.task_loss /= seen as f64;
        stats.resource_loss /= seen as f64;
    }
    Ok(stats)
}

/// Loss (and accuracy for classification) over a whole split.
pub fn evaluate(
    net: &Network,
    task: &TaskData<'_>,
    split: &Split,
    masks: MaskSource<'_>,
) -> Result<EvalMetrics> {
    let n = split.rows();
    if n == 0 {
        return Err(SearchError::Config("cannot evaluate an empty split".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(1024) {
        let x = task.inputs(split, chunk)?;
        let y = net.predict(&x, masks)?;
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let l = task_loss(&mut g, yv, &split.y, chunk)?;
        loss += g.value(l).item() * chunk.len() as f64;
        if let Targets::Classes(c) = &split.y {
            let k = y.shape()[1];
            for (r, &i) in chunk.iter().enumerate() {
                let row = &y.data()[r * k..(r + 1) * k];
                let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(best == c[i]);
            }
        }
    }
    Ok(EvalMetrics {
        loss: loss / n as f64,
        accuracy: match task.data.output {
            OutputKind::Classes(_) => Some(correct as f64 / n as f64),
            OutputKind::Regression(_) => None,
        },
    })
}

/// Current ratios keyed by operator name.
pub(crate) fn ratios(net: &Network) -> BTreeMap<String, f64> {
    net.operators.iter().map(|o| (o.name.clone(), o.a)).collect()
}
