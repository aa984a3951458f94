use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ResourceError;

/// Quadratic features `{1, a_in, a_out, a_in², a_in·a_out, a_out²}`.
pub fn quadratic_features(a_in: f64, a_out: f64) -> [f64; 6] {
    [1.0, a_in, a_out, a_in * a_in, a_in * a_out, a_out * a_out]
}

/// One measured latency of a layer pruned to `(a_in, a_out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub layer_id: String,
    pub a_in: f64,
    pub a_out: f64,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyTable {
    pub samples: Vec<LatencySample>,
}

impl LatencyTable {
    pub fn new(samples: Vec<LatencySample>) -> Result<Self, ResourceError> {
        let t = Self { samples };
        t.validate()?;
        Ok(t)
    }

    /// Positive finite latencies, ratios in `[0, 1]`, and at least six samples
    /// per layer.
    pub fn validate(&self) -> Result<(), ResourceError> {
        if self.samples.is_empty() {
            return Err(ResourceError::Table("latency table has no samples".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let row = i + 2;
            if !(s.latency_seconds.is_finite() && s.latency_seconds > 0.0) {
                return Err(ResourceError::Table(format!(
                    "row {row}: latency {} is not positive",
                    s.latency_seconds
                )));
            }
            for (name, v) in [("a_in", s.a_in), ("a_out", s.a_out)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ResourceError::Table(format!(
                        "row {row}: {name} = {v} is outside [0, 1]"
                    )));
                }
            }
        }
        for (layer, rows) in self.by_layer() {
            if rows.len() < 6 {
                return Err(ResourceError::Table(format!(
                    "layer `{layer}` has {} samples, at least 6 are needed",
                    rows.len()
                )));
            }
        }
        Ok(())
    }

    pub fn by_layer(&self) -> BTreeMap<&str, Vec<&LatencySample>> {
        let mut m: BTreeMap<&str, Vec<&LatencySample>> = BTreeMap::new();
        for s in &self.samples {
            m.entry(s.layer_id.as_str()).or_default().push(s);
        }
        m
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, ResourceError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| ResourceError::Table(e.to_string()))?.clone();
        let expected = ["layer_id", "a_in", "a_out", "latency_seconds"];
        if headers.iter().ne(expected) {
            return Err(ResourceError::Table(format!(
                "header must be `{}`, found `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut samples = Vec::new();
        for (i, rec) in rdr.deserialize().enumerate() {
            let s: LatencySample =
                rec.map_err(|e| ResourceError::Table(format!("row {}: {e}", i + 2)))?;
            samples.push(s);
        }
        Self::new(samples)
    }

    pub fn from_path(path: &Path) -> Result<Self, ResourceError> {
        let f = std::fs::File::open(path)
            .map_err(|e| ResourceError::Table(format!("{}: {e}", path.display())))?;
        Self::read_csv(f)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ResourceError> {
        let mut w = csv::Writer::from_writer(writer);
        for s in &self.samples {
            w.serialize(s).map_err(|e| ResourceError::Table(e.to_string()))?;
        }
        w.flush().map_err(|e| ResourceError::Table(e.to_string()))
    }

    /// Samples `layers` on a `grid × grid` lattice of ratios in `[0, a_max]`
    /// from known quadratics (absolute seconds), with multiplicative Gaussian
    /// noise of relative size `noise`.
    pub fn synthesize<R: Rng>(
        layers: &[(String, [f64; 6])],
        grid: usize,
        a_max: f64,
        noise: f64,
        rng: &mut R,
    ) -> Result<Self, ResourceError> {
        if grid < 3 {
            return Err(ResourceError::Table("grid needs at least 3 points per axis".into()));
        }
        let mut samples = Vec::new();
        for (layer, beta) in layers {
            for i in 0..grid {
                for j in 0..grid {
                    let a_in = a_max * i as f64 / (grid - 1) as f64;
                    let a_out = a_max * j as f64 / (grid - 1) as f64;
                    let clean: f64 = quadratic_features(a_in, a_out)
                        .iter()
                        .zip(beta)
                        .map(|(x, b)| x * b)
                        .sum();
                    let z: f64 = rng.sample(StandardNormal);
                    samples.push(LatencySample {
                        layer_id: layer.clone(),
                        a_in,
                        a_out,
                        latency_seconds: clean * (1.0 + noise * z),
                    });
                }
            }
        }
        Self::new(samples)
    }
}

/// Fitted latency of one layer: `latency_max · F(a_in, a_out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLatency {
    /// Coefficients of `F` over [`quadratic_features`].
    pub coefficients: [f64; 6],
    pub latency_max: f64,
    pub mse: f64,
    pub r_squared: f64,
    pub samples: usize,
}

impl LayerLatency {
    pub fn predict(&self, a_in: f64, a_out: f64) -> f64 {
        let f: f64 = quadratic_features(a_in, a_out)
            .iter()
            .zip(&self.coefficients)
            .map(|(x, c)| x * c)
            .sum();
        self.latency_max * f
    }

    /// Coefficients in seconds, `latency_max · F`.
    pub fn absolute_coefficients(&self) -> [f64; 6] {
        self.coefficients.map(|c| c * self.latency_max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub layers: BTreeMap<String, LayerLatency>,
}

impl LatencyModel {
    pub fn layer(&self, id: &str) -> Result<&LayerLatency, ResourceError> {
        self.layers
            .get(id)
            .ok_or_else(|| ResourceError::MissingLatency(id.to_string()))
    }
}

/// Least-squares quadratic per layer via the normal equations.
pub fn fit_latency_model(table: &LatencyTable) -> Result<LatencyModel, ResourceError> {
    table.validate()?;
    let mut model = LatencyModel::default();
    for (layer, rows) in table.by_layer() {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 6, |r, c| quadratic_features(rows[r].a_in, rows[r].a_out)[c]);
        let y = DVector::from_iterator(n, rows.iter().map(|s| s.latency_seconds));

        let sv = x.singular_values();
        let top = sv.max();
        if sv.iter().filter(|&&s| s > top * 1e-10).count() < 6 {
            return Err(ResourceError::RankDeficient(layer.to_string()));
        }
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &y;
        let beta = xtx
            .cholesky()
            .ok_or_else(|| ResourceError::RankDeficient(layer.to_string()))?
            .solve(&xty);

        let fitted = &x * &beta;
        let ss_res: f64 = (&y - &fitted).iter().map(|r| r * r).sum();
        let mean = y.mean();
        let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        let r_squared = if ss_tot > f64::EPSILON * mean * mean * n as f64 {
            1.0 - ss_res / ss_tot
        } else {
            // constant measurements: any exact constant fit explains them
            1.0
        };

        let at_zero = rows
            .iter()
            .find(|s| s.a_in == 0.0 && s.a_out == 0.0)
            .map(|s| s.latency_seconds)
            .unwrap_or(beta[0]);
        if !(at_zero.is_finite() && at_zero > 0.0) {
            return Err(ResourceError::Table(format!(
                "layer `{layer}`: unpruned latency {at_zero} is not positive"
            )));
        }
        let mut coefficients = [0.0; 6];
        for (c, b) in coefficients.iter_mut().zip(beta.iter()) {
            *c = b / at_zero;
        }
        model.layers.insert(
            layer.to_string(),
            LayerLatency {
                coefficients,
                latency_max: at_zero,
                mse: ss_res / n as f64,
                r_squared,
                samples: n,
            },
        );
    }
    Ok(model)
}
