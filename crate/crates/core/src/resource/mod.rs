//! Resource models over a searchable network: differentiable MACs,
//! parameters, and fitted latency; the constraint loss; and the target
//! schedule.
//!
//! Consumption uses the retained fraction `ρ = 1 - a` of each dimension, so
//! `a = 0` everywhere costs exactly the supernet (up to depth gating, which
//! scales a block's cost by its soft depth mask). Costs are per sample.

mod latency;

pub use latency::{
    fit_latency_model, quadratic_features, LatencyModel, LatencySample, LatencyTable,
    LayerLatency,
};

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::network::{ArchitectureDescription, Bound, CostTerm, Layout, Network, ResourceKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResourceError {
    #[error("latency table: {0}")]
    Table(String),
    #[error("layer `{0}` has fewer than 6 independent latency samples")]
    RankDeficient(String),
    #[error("no fitted latency model for layer `{0}`")]
    MissingLatency(String),
    #[error("{name} must be positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("epoch {e} outside [0, {e_max}]")]
    EpochRange { e: usize, e_max: usize },
    #[error("final target {r_final} must be below supernet consumption {r_supernet}")]
    TargetNotBelowSupernet { r_final: f64, r_supernet: f64 },
    #[error("architecture has no entry for dimension `{0}`")]
    MissingEntry(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, ResourceError>;

/// What a budget constrains.
#[derive(Debug, Clone, PartialEq)]
pub enum ResourceModel {
    Macs,
    Params,
    Latency(LatencyModel),
}

impl ResourceModel {
    pub fn kind(&self) -> ResourceKind {
        match self {
            ResourceModel::Macs => ResourceKind::Macs,
            ResourceModel::Params => ResourceKind::Params,
            ResourceModel::Latency(_) => ResourceKind::Latency,
        }
    }

    /// Checks that every cost term has what it needs.
    pub fn check(&self, layout: &Layout) -> Result<()> {
        if let ResourceModel::Latency(m) = self {
            for t in &layout.terms {
                m.layer(&t.layer)?;
            }
        }
        Ok(())
    }

    fn term_value(&self, t: &CostTerm, rho: &[f64], gate: f64) -> Result<f64> {
        match self {
            ResourceModel::Latency(m) => {
                let a_in = 1.0 - t.in_dims.iter().map(|&d| rho[d]).product::<f64>();
                let a_out = 1.0 - t.out_dims.iter().map(|&d| rho[d]).product::<f64>();
                Ok(m.layer(&t.layer)?.predict(a_in, a_out) * gate)
            }
            _ => Ok(t.evaluate(self.kind(), rho, gate)),
        }
    }

    fn total(&self, layout: &Layout, rho: &[f64], gate: impl Fn(usize, usize) -> f64) -> Result<f64> {
        let mut sum = 0.0;
        for t in &layout.terms {
            let g = t.gate.map_or(1.0, |(d, j)| gate(d, j));
            sum += self.term_value(t, rho, g)?;
        }
        Ok(sum)
    }
}

/// Consumption of the unpruned supernet.
pub fn supernet_consumption(layout: &Layout, rm: &ResourceModel) -> Result<f64> {
    rm.total(layout, &vec![1.0; layout.dims.len()], |_, _| 1.0)
}

/// Consumption of a discrete architecture described against the supernet
/// `layout`: widths retain `k / n` of each dimension and removed blocks cost
/// nothing. For MACs and parameters this is the exact count.
pub fn discrete_consumption(
    layout: &Layout,
    desc: &ArchitectureDescription,
    rm: &ResourceModel,
) -> Result<f64> {
    let mut rho = Vec::with_capacity(layout.dims.len());
    let mut kept = Vec::with_capacity(layout.dims.len());
    for d in &layout.dims {
        let e = desc
            .entry(&d.name)
            .ok_or_else(|| ResourceError::MissingEntry(d.name.clone()))?;
        rho.push(e.k as f64 / d.size as f64);
        kept.push(&e.retained);
    }
    rm.total(layout, &rho, |d, j| {
        if kept[d].binary_search(&j).is_ok() {
            1.0
        } else {
            0.0
        }
    })
}

/// Soft consumption at the operators' current ratios, without a graph.
pub fn consumption_value(net: &Network, rm: &ResourceModel) -> Result<f64> {
    let layout = net.layout();
    let rho: Vec<f64> = (0..layout.dims.len())
        .map(|d| net.dim_operator(d).map_or(1.0, |o| 1.0 - net.operators[o].a))
        .collect();
    let masks = net
        .operators
        .iter()
        .map(|o| o.unit_mask())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| ResourceError::Table(e.to_string()))?;
    rm.total(layout, &rho, |d, j| match net.dim_operator(d) {
        Some(o) => masks[o][j / net.operators[o].group_size],
        None => 1.0,
    })
}

/// Differentiable current consumption `r_c` on the graph holding `bound`.
pub fn current_consumption(
    g: &mut Graph,
    net: &Network,
    bound: &Bound,
    rm: &ResourceModel,
) -> Result<Var> {
    let layout = net.layout();
    rm.check(layout)?;
    let one = g.scalar(1.0);
    let mut rho: Vec<Option<Var>> = Vec::with_capacity(layout.dims.len());
    for d in 0..layout.dims.len() {
        rho.push(match net.dim_operator(d) {
            Some(o) => Some(g.sub(one, bound.a[o])?),
            None => None,
        });
    }
    let product = |g: &mut Graph, dims: &[usize]| -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for &d in dims {
            if let Some(r) = rho[d] {
                acc = Some(match acc {
                    Some(p) => g.mul(p, r)?,
                    None => r,
                });
            }
        }
        Ok(acc)
    };

    let mut total: Option<Var> = None;
    let mut constant = 0.0;
    for t in &layout.terms {
        let rin = product(g, &t.in_dims)?;
        let rout = product(g, &t.out_dims)?;
        let (value, fixed) = match rm {
            ResourceModel::Latency(m) => {
                let lat = m.layer(&t.layer)?;
                let c = lat.absolute_coefficients();
                let a_in = rin.map(|r| g.sub(one, r)).transpose()?;
                let a_out = rout.map(|r| g.sub(one, r)).transpose()?;
                latency_term(g, c, a_in, a_out)?
            }
            _ => {
                let base = t.evaluate(rm.kind(), &vec![1.0; layout.dims.len()], 1.0);
                if base == 0.0 {
                    continue;
                }
                // weights scale with ρ_in·ρ_out; a bias with ρ_out alone
                let bias = match rm.kind() {
                    ResourceKind::Params if t.bias => t.out_size as f64,
                    _ => 0.0,
                };
                let weights = base - bias;
                let mut parts: Vec<(Option<Var>, f64)> = Vec::new();
                let both = match (rin, rout) {
                    (Some(a), Some(b)) => Some(g.mul(a, b)?),
                    (a, b) => a.or(b),
                };
                parts.push((both, weights));
                if bias > 0.0 {
                    parts.push((rout, bias));
                }
                let mut v: Option<Var> = None;
                let mut f = 0.0;
                for (var, w) in parts {
                    match var {
                        Some(x) => {
                            let s = g.scale(x, w)?;
                            v = Some(match v {
                                Some(p) => g.add(p, s)?,
                                None => s,
                            });
                        }
                        None => f += w,
                    }
                }
                (v, f)
            }
        };
        let gate = match t.gate {
            Some((d, j)) => match net.dim_operator(d) {
                Some(o) => {
                    let u = j / net.operators[o].group_size;
                    Some(g.slice(bound.unit_masks[o], 0, u, u + 1)?)
                }
                None => None,
            },
            None => None,
        };
        match gate {
            Some(m) => {
                let mut v = match value {
                    Some(v) => {
                        let f = g.scalar(fixed);
                        g.add(v, f)?
                    }
                    None => g.scalar(fixed),
                };
                v = g.mul(v, m)?;
                total = Some(match total {
                    Some(p) => g.add(p, v)?,
                    None => v,
                });
            }
            None => {
                constant += fixed;
                if let Some(v) = value {
                    total = Some(match total {
                        Some(p) => g.add(p, v)?,
                        None => v,
                    });
                }
            }
        }
    }
    let c = g.scalar(constant);
    Ok(match total {
        Some(t) => g.add(t, c)?,
        None => c,
    })
}

/// `Σ c_i φ_i(a_in, a_out)` split into a graph part and a constant part.
fn latency_term(
    g: &mut Graph,
    c: [f64; 6],
    a_in: Option<Var>,
    a_out: Option<Var>,
) -> Result<(Option<Var>, f64)> {
    // absent ratios are exactly zero, so their terms vanish
    let mut acc: Option<Var> = None;
    let mut push = |g: &mut Graph, v: Option<Var>, w: f64| -> Result<()> {
        if let Some(v) = v {
            let s = g.scale(v, w)?;
            acc = Some(match acc {
                Some(p) => g.add(p, s)?,
                None => s,
            });
        }
        Ok(())
    };
    let sq = |g: &mut Graph, x: Option<Var>, y: Option<Var>| -> Result<Option<Var>> {
        Ok(match (x, y) {
            (Some(x), Some(y)) => Some(g.mul(x, y)?),
            _ => None,
        })
    };
    let in2 = sq(g, a_in, a_in)?;
    let cross = sq(g, a_in, a_out)?;
    let out2 = sq(g, a_out, a_out)?;
    push(g, a_in, c[1])?;
    push(g, a_out, c[2])?;
    push(g, in2, c[3])?;
    push(g, cross, c[4])?;
    push(g, out2, c[5])?;
    Ok((acc, c[0]))
}

/// `log(r_c / r_t)` while `r_c > r_t`, else zero with zero gradient.
pub fn resource_loss(g: &mut Graph, r_c: Var, r_t: f64) -> Result<Var> {
    let rc = g.value(r_c).item();
    if !(rc > 0.0) {
        return Err(ResourceError::NotPositive {
            name: "current consumption",
            value: rc,
        });
    }
    if !(r_t > 0.0) {
        return Err(ResourceError::NotPositive {
            name: "target",
            value: r_t,
        });
    }
    if rc > r_t {
        let ratio = g.scale(r_c, 1.0 / r_t)?;
        Ok(g.log(ratio)?)
    } else {
        Ok(g.scale(r_c, 0.0)?)
    }
}

/// `r_t = (r_final / r_supernet)^(e / e_max) · r_supernet`.
pub fn target_schedule(e: usize, e_max: usize, r_final: f64, r_supernet: f64) -> Result<f64> {
    if e_max == 0 || e > e_max {
        return Err(ResourceError::EpochRange { e, e_max });
    }
    for (name, value) in [("final target", r_final), ("supernet consumption", r_supernet)] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(ResourceError::NotPositive { name, value });
        }
    }
    if r_final >= r_supernet {
        return Err(ResourceError::TargetNotBelowSupernet {
            r_final,
            r_supernet,
        });
    }
    if e == 0 {
        return Ok(r_supernet);
    }
    if e == e_max {
        return Ok(r_final);
    }
    Ok((r_final / r_supernet).powf(e as f64 / e_max as f64) * r_supernet)
}
