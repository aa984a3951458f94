//! Finite-difference suite over every autodiff primitive and over the full
//! path from pruning ratios and weights through soft masks, the forward pass,
//! and the task-plus-resource loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{
    central_difference, grad_check, relative_error, AutodiffError, Graph, Tensor, Var,
    DEFAULT_EPSILON,
};
use crate::network::{MaskSource, ModelSpec, Network, NetworkError, OperatorOptions};
use crate::resource::{current_consumption, resource_loss, ResourceError, ResourceModel};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
const COMPOSITE_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FidelityError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub composite: bool,
    /// Worst relative error over seeds and coordinates.
    pub max_error: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityReport {
    pub seeds: u64,
    pub cases: Vec<CaseResult>,
}

impl FidelityReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn max_error(&self, composite: bool) -> f64 {
        self.cases
            .iter()
            .filter(|c| c.composite == composite)
            .map(|c| c.max_error)
            .fold(0.0, f64::max)
    }
}

type Case = fn(&mut Graph, Var, u64) -> Result<Var, AutodiffError>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .expect("shape matches data")
}

/// Reduces `y` to a scalar through a seeded random weighting so every output
/// coordinate contributes.
fn weigh(g: &mut Graph, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, g.shape(y)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn primitive_cases() -> Vec<(&'static str, Vec<usize>, Case)> {
    vec![
        ("add", vec![2, 3], |g, x, s| {
            let c = g.constant(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0])?);
            let y = g.add(x, c)?;
            let y = g.add(y, x)?;
            weigh(g, y, s)
        }),
        ("sub", vec![2, 3], |g, x, s| {
            let r = g.slice(x, 0, 0, 1)?;
            let y = g.sub(x, r)?;
            weigh(g, y, s)
        }),
        ("mul", vec![2, 3], |g, x, s| {
            let r = g.slice(x, 1, 1, 2)?;
            let y = g.mul(x, r)?;
            weigh(g, y, s)
        }),
        ("matmul", vec![3, 4], |g, x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5a5a);
            let b = g.constant(rand_tensor(&mut rng, &[4, 2]));
            let y = g.matmul(x, b)?;
            let xt = g.permute(x, &[1, 0])?;
            let z = g.matmul(x, xt)?;
            let a = weigh(g, y, s)?;
            let b = weigh(g, z, s + 1)?;
            g.add(a, b)
        }),
        ("batched_matmul", vec![2, 3, 3], |g, x, s| {
            let y = g.matmul(x, x)?;
            weigh(g, y, s)
        }),
        ("sigmoid", vec![5], |g, x, s| {
            let y = g.sigmoid(x)?;
            weigh(g, y, s)
        }),
        ("relu", vec![5], |g, x, s| {
            let y = g.relu(x)?;
            weigh(g, y, s)
        }),
        ("log", vec![4], |g, x, s| {
            let sq = g.mul(x, x)?;
            let half = g.constant(Tensor::filled(&[4], 0.5));
            let sq = g.add(sq, half)?;
            let y = g.log(sq)?;
            weigh(g, y, s)
        }),
        ("exp", vec![4], |g, x, s| {
            let y = g.exp(x)?;
            weigh(g, y, s)
        }),
        ("sum_mean_scale", vec![3, 2], |g, x, _| {
            let s = g.sum(x)?;
            let m = g.mean(x)?;
            let m = g.scale(m, -3.0)?;
            let p = g.mul(s, m)?;
            g.sum(p)
        }),
        ("reshape_slice_permute", vec![2, 3, 4], |g, x, s| {
            let p = g.permute(x, &[2, 0, 1])?;
            let sl = g.slice(p, 0, 1, 3)?;
            let r = g.reshape(sl, &[4, 3])?;
            weigh(g, r, s)
        }),
        ("softmax", vec![2, 4], |g, x, s| {
            let y = g.softmax(x)?;
            weigh(g, y, s)
        }),
        ("softmax_cross_entropy", vec![3, 4], |g, x, s| {
            let labels = [s as usize % 4, 3, (s as usize / 4) % 4];
            g.softmax_cross_entropy(x, &labels)
        }),
    ]
}

fn spec(json: &str) -> ModelSpec {
    serde_json::from_str(json).expect("built-in spec parses")
}

/// Searchable models covering every gated layer kind, with the rows per
/// sample batch and whether the task is classification.
fn composite_models() -> Vec<(&'static str, ModelSpec, usize, Option<usize>)> {
    vec![
        (
            "mlp",
            spec(
                r#"{"input_dim": 5, "input_search": {}, "layers": [
                    {"kind": "linear", "name": "fc1", "out_features": 7, "activation": "relu",
                     "search": {}},
                    {"kind": "linear", "name": "fc2", "out_features": 6, "activation": "relu",
                     "search": {"step": 2}},
                    {"kind": "linear", "name": "out", "out_features": 3}]}"#,
            ),
            4,
            Some(3),
        ),
        (
            "residual",
            spec(
                r#"{"input_dim": 4, "layers": [
                    {"kind": "linear", "name": "in", "out_features": 5, "search": {}},
                    {"kind": "residual", "name": "stage", "blocks": 3, "hidden": 6,
                     "hidden_search": {}, "depth_search": {}},
                    {"kind": "linear", "name": "out", "out_features": 2}]}"#,
            ),
            4,
            None,
        ),
        (
            "attention",
            spec(
                r#"{"input_dim": 4, "seq_len": 3, "input_search": {}, "layers": [
                    {"kind": "attention", "name": "att", "heads": 2, "qk_dim": 3, "v_dim": 3,
                     "head_search": {}, "qk_search": {}, "v_search": {}},
                    {"kind": "mean_pool"},
                    {"kind": "linear", "name": "head", "out_features": 3}]}"#,
            ),
            6,
            Some(3),
        ),
    ]
}

struct Composite {
    net: Network,
    x: Tensor,
    labels: Vec<usize>,
    targets: Option<Tensor>,
    r_t: f64,
}

impl Composite {
    fn new(spec: &ModelSpec, rows: usize, classes: Option<usize>, seed: u64) -> Result<Self, FidelityError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::build(spec, &mut rng, OperatorOptions::default())?;
        for op in &mut net.operators {
            for c in &mut op.importance {
                *c = rng.gen_range(0.0..1.0);
            }
            let hi = (op.a_max - 0.05).min(0.7);
            op.a = rng.gen_range(0.05..hi.max(0.06));
        }
        let x = rand_tensor(&mut rng, &[rows, spec.input_dim]);
        let samples = rows / spec.seq_len;
        let out = spec.output_features()?;
        let (labels, targets) = match classes {
            Some(k) => ((0..samples).map(|_| rng.gen_range(0..k)).collect(), None),
            None => (Vec::new(), Some(rand_tensor(&mut rng, &[samples, out]))),
        };
        let mut c = Self {
            net,
            x,
            labels,
            targets,
            r_t: 0.0,
        };
        let mut g = Graph::new();
        let b = c.net.bind(&mut g, true, MaskSource::Soft)?;
        let rc = current_consumption(&mut g, &c.net, &b, &ResourceModel::Macs)?;
        c.r_t = 0.5 * g.value(rc).item();
        Ok(c)
    }

    fn variables(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.net.operators.iter().map(|o| o.a).collect();
        for p in self.net.params() {
            v.extend_from_slice(p.data());
        }
        v
    }

    fn set_variables(&mut self, v: &[f64]) {
        let n = self.net.operators.len();
        for (op, &a) in self.net.operators.iter_mut().zip(v) {
            op.a = a;
        }
        let mut at = n;
        for p in self.net.params_mut() {
            let len = p.numel();
            p.data_mut().copy_from_slice(&v[at..at + len]);
            at += len;
        }
    }

    /// Task loss plus the resource loss, with gradients for every variable.
    fn total(&self, want_grads: bool) -> Result<(f64, Vec<f64>), FidelityError> {
        let mut g = Graph::new();
        let b = self.net.bind(&mut g, true, MaskSource::Soft)?;
        let x = g.constant(self.x.clone());
        let y = self.net.forward(&mut g, &b, x)?;
        let task = match &self.targets {
            None => g.softmax_cross_entropy(y, &self.labels)?,
            Some(t) => {
                let t = g.constant(t.clone());
                let d = g.sub(y, t)?;
                let sq = g.mul(d, d)?;
                g.mean(sq)?
            }
        };
        let rc = current_consumption(&mut g, &self.net, &b, &ResourceModel::Macs)?;
        let rl = resource_loss(&mut g, rc, self.r_t)?;
        let total = g.add(task, rl)?;
        let value = g.value(total).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(total)?;
        let mut out: Vec<f64> = b.a.iter().map(|&a| grads.scalar(a)).collect();
        for (&v, p) in b.params.iter().zip(self.net.params()) {
            out.extend(grads.values_or_zero(v, p.numel()));
        }
        Ok((value, out))
    }
}

fn composite_error(spec: &ModelSpec, rows: usize, classes: Option<usize>, seed: u64) -> Result<f64, FidelityError> {
    let c = Composite::new(spec, rows, classes, seed)?;
    let (_, analytic) = c.total(true)?;
    let point = c.variables();
    let probe = std::cell::RefCell::new(c);
    let numeric = central_difference(
        |v| {
            let mut c = probe.borrow_mut();
            c.set_variables(v);
            c.total(false).map_or(f64::NAN, |(l, _)| l)
        },
        &point,
        COMPOSITE_EPSILON,
    );
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        if !n.is_finite() {
            return Err(AutodiffError::NonFinite.into());
        }
        worst = worst.max(relative_error(*a, *n));
    }
    Ok(worst)
}

/// Runs every case over seeds `0..seeds`.
pub fn run(seeds: u64) -> Result<FidelityReport, FidelityError> {
    let mut cases = Vec::new();
    for (name, shape, f) in primitive_cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut p = rand_tensor(&mut rng, &shape);
            if name == "relu" {
                // keep away from the kink
                for v in p.data_mut() {
                    if v.abs() < 1e-3 {
                        *v = 0.1;
                    }
                }
            }
            worst = worst.max(grad_check(|g, x| f(g, x, seed), &p, DEFAULT_EPSILON)?);
        }
        cases.push(CaseResult {
            name: name.into(),
            composite: false,
            max_error: worst,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    for (name, spec, rows, classes) in composite_models() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(composite_error(&spec, rows, classes, seed)?);
        }
        cases.push(CaseResult {
            name: format!("ratio_mask_forward_loss/{name}"),
            composite: true,
            max_error: worst,
            tolerance: COMPOSITE_TOLERANCE,
        });
    }
    Ok(FidelityReport { seeds, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_seeds() {
        let r = run(5).unwrap();
        for c in &r.cases {
            assert!(c.passed(), "{}: {}", c.name, c.max_error);
        }
        assert_eq!(r.cases.iter().filter(|c| c.composite).count(), 3);
        assert!(r.max_error(true) > 0.0);
    }
}
