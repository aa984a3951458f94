//! Declarative model description and its static layout: the feature
//! dimensions each layer touches and the cost terms used for resource
//! accounting.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::NetworkError;
use crate::topk::OperatorKind;

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

/// Search settings for one dimension. Absent means the dimension is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimSearch {
    /// Smallest retained size; bounds the pruning ratio from above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<usize>,
    /// Elements per shared-mask unit.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub step: usize,
}

impl Default for DimSearch {
    fn default() -> Self {
        Self { min: None, step: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

/// Hidden widths of a residual stage: one for all blocks or one per block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Widths {
    Uniform(usize),
    PerBlock(Vec<usize>),
}

impl Widths {
    pub fn get(&self, block: usize) -> usize {
        match self {
            Widths::Uniform(w) => *w,
            Widths::PerBlock(v) => v[block],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Affine map onto a new feature dimension named after the layer.
    Linear {
        name: String,
        out_features: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        search: Option<DimSearch>,
    },
    /// Stage of residual blocks `x ← x + f(x)` with `f = fc2 ∘ relu ∘ fc1`,
    /// operating on the incoming feature dimension.
    Residual {
        name: String,
        blocks: usize,
        hidden: Widths,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hidden_search: Option<DimSearch>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depth_search: Option<DimSearch>,
    },
    /// Residual multi-head self-attention over the token axis.
    Attention {
        name: String,
        heads: usize,
        qk_dim: usize,
        v_dim: usize,
        /// Score scale; defaults to `1/sqrt(qk_dim)`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        head_search: Option<DimSearch>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        qk_search: Option<DimSearch>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        v_search: Option<DimSearch>,
    },
    /// Averages tokens of each sample; later layers see one row per sample.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Tokens per sample; inputs arrive as `(batch * seq_len, input_dim)`.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_search: Option<DimSearch>,
    pub layers: Vec<LayerSpec>,
    /// Dimension names that must prune identically and share one operator.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<Vec<String>>,
}

/// One feature dimension of the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DimInfo {
    pub name: String,
    pub size: usize,
    pub kind: OperatorKind,
    pub search: Option<DimSearch>,
}

/// A product-shaped cost contribution. With retained fractions `ρ_d` for the
/// listed dimensions, its MACs are `tokens·in·out·Πρ_in·Πρ_out` and its
/// parameters `in·out·Πρ_in·Πρ_out (+ out·Πρ_out for the bias)`, scaled by the
/// depth gate when present.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTerm {
    /// Layer id, used to look up latency models.
    pub layer: String,
    pub in_size: usize,
    pub out_size: usize,
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
    pub tokens: usize,
    /// Whether the term owns weights (false for attention score products).
    pub weighted: bool,
    pub bias: bool,
    /// Depth dimension and block index gating this term.
    pub gate: Option<(usize, usize)>,
}

/// Dimension indices used by one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerDims {
    Linear {
        input: usize,
        output: usize,
    },
    Residual {
        stream: usize,
        depth: usize,
        hidden: Vec<usize>,
    },
    Attention {
        stream: usize,
        heads: usize,
        qk: usize,
        v: usize,
        tokens: usize,
    },
    MeanPool {
        tokens: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub dims: Vec<DimInfo>,
    pub layers: Vec<LayerDims>,
    pub terms: Vec<CostTerm>,
    /// Dimension feeding the final output.
    pub output_dim: usize,
}

impl Layout {
    pub fn dim_index(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }
}

/// Resource quantities that can be counted exactly on a discrete model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Macs,
    Params,
    Latency,
}

impl std::fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResourceKind::Macs => "macs",
            ResourceKind::Params => "params",
            ResourceKind::Latency => "latency",
        })
    }
}

impl CostTerm {
    /// Contribution given retained fractions per dimension and a gate value.
    pub fn evaluate(&self, kind: ResourceKind, rho: &[f64], gate: f64) -> f64 {
        let rin: f64 = self.in_dims.iter().map(|&d| rho[d]).product();
        let rout: f64 = self.out_dims.iter().map(|&d| rho[d]).product();
        let core = self.in_size as f64 * rin * self.out_size as f64 * rout;
        let v = match kind {
            ResourceKind::Macs => self.tokens as f64 * core,
            ResourceKind::Params if self.weighted => {
                core + if self.bias {
                    self.out_size as f64 * rout
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        v * gate
    }
}

impl ModelSpec {
    /// Resolves dimensions, per-layer dimension use, and cost terms.
    pub fn layout(&self) -> Result<Layout, NetworkError> {
        let mut dims: Vec<DimInfo> = Vec::new();
        let add_dim = |dims: &mut Vec<DimInfo>,
                           name: String,
                           size: usize,
                           kind: OperatorKind,
                           search: Option<DimSearch>|
         -> Result<usize, NetworkError> {
            if size == 0 {
                return Err(NetworkError::ZeroSize(name));
            }
            if dims.iter().any(|d| d.name == name) {
                return Err(NetworkError::DuplicateName(name));
            }
            dims.push(DimInfo {
                name,
                size,
                kind,
                search,
            });
            Ok(dims.len() - 1)
        };
        if self.seq_len == 0 {
            return Err(NetworkError::ZeroSize("seq_len".into()));
        }
        let mut stream = add_dim(
            &mut dims,
            "input".into(),
            self.input_dim,
            OperatorKind::Width,
            self.input_search,
        )?;
        let mut tokens = self.seq_len;
        let mut layers = Vec::new();
        let mut terms = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerSpec::Linear {
                    name,
                    out_features,
                    search,
                    ..
                } => {
                    let out = add_dim(
                        &mut dims,
                        name.clone(),
                        *out_features,
                        OperatorKind::Width,
                        *search,
                    )?;
                    terms.push(CostTerm {
                        layer: name.clone(),
                        in_size: dims[stream].size,
                        out_size: *out_features,
                        in_dims: vec![stream],
                        out_dims: vec![out],
                        tokens,
                        weighted: true,
                        bias: true,
                        gate: None,
                    });
                    layers.push(LayerDims::Linear {
                        input: stream,
                        output: out,
                    });
                    stream = out;
                }
                LayerSpec::Residual {
                    name,
                    blocks,
                    hidden,
                    hidden_search,
                    depth_search,
                } => {
                    if let Widths::PerBlock(v) = hidden {
                        if v.len() != *blocks {
                            return Err(NetworkError::Invalid(format!(
                                "stage `{name}` lists {} hidden widths for {blocks} blocks",
                                v.len()
                            )));
                        }
                    }
                    let depth = add_dim(
                        &mut dims,
                        format!("{name}.depth"),
                        *blocks,
                        OperatorKind::Depth,
                        *depth_search,
                    )?;
                    let s = dims[stream].size;
                    let mut hid = Vec::with_capacity(*blocks);
                    for j in 0..*blocks {
                        let h = add_dim(
                            &mut dims,
                            format!("{name}.{j}.hidden"),
                            hidden.get(j),
                            OperatorKind::Width,
                            *hidden_search,
                        )?;
                        terms.push(CostTerm {
                            layer: format!("{name}.{j}.fc1"),
                            in_size: s,
                            out_size: hidden.get(j),
                            in_dims: vec![stream],
                            out_dims: vec![h],
                            tokens,
                            weighted: true,
                            bias: true,
                            gate: Some((depth, j)),
                        });
                        terms.push(CostTerm {
                            layer: format!("{name}.{j}.fc2"),
                            in_size: hidden.get(j),
                            out_size: s,
                            in_dims: vec![h],
                            out_dims: vec![stream],
                            tokens,
                            weighted: true,
                            bias: true,
                            gate: Some((depth, j)),
                        });
                        hid.push(h);
                    }
                    layers.push(LayerDims::Residual {
                        stream,
                        depth,
                        hidden: hid,
                    });
                }
                LayerSpec::Attention {
                    name,
                    heads,
                    qk_dim,
                    v_dim,
                    head_search,
                    qk_search,
                    v_search,
                    ..
                } => {
                    let h = add_dim(
                        &mut dims,
                        format!("{name}.heads"),
                        *heads,
                        OperatorKind::Heads,
                        *head_search,
                    )?;
                    let qk = add_dim(
                        &mut dims,
                        format!("{name}.qk"),
                        *qk_dim,
                        OperatorKind::Width,
                        *qk_search,
                    )?;
                    let v = add_dim(
                        &mut dims,
                        format!("{name}.v"),
                        *v_dim,
                        OperatorKind::Width,
                        *v_search,
                    )?;
                    let e = dims[stream].size;
                    let proj = |layer: &str, inner: usize, inner_dim: usize, input: bool| {
                        let (in_size, out_size, in_dims, out_dims) = if input {
                            (e, heads * inner, vec![stream], vec![h, inner_dim])
                        } else {
                            (heads * inner, e, vec![h, inner_dim], vec![stream])
                        };
                        CostTerm {
                            layer: format!("{name}.{layer}"),
                            in_size,
                            out_size,
                            in_dims,
                            out_dims,
                            tokens,
                            weighted: true,
                            bias: true,
                            gate: None,
                        }
                    };
                    terms.push(proj("q", *qk_dim, qk, true));
                    terms.push(proj("k", *qk_dim, qk, true));
                    terms.push(proj("v", *v_dim, v, true));
                    terms.push(proj("o", *v_dim, v, false));
                    // score and mixing products: per sample L·L·H·D
                    for (label, d, dim) in [("scores", *qk_dim, qk), ("mix", *v_dim, v)] {
                        terms.push(CostTerm {
                            layer: format!("{name}.{label}"),
                            in_size: heads * d,
                            out_size: tokens,
                            in_dims: vec![h, dim],
                            out_dims: vec![],
                            tokens,
                            weighted: false,
                            bias: false,
                            gate: None,
                        });
                    }
                    layers.push(LayerDims::Attention {
                        stream,
                        heads: h,
                        qk,
                        v,
                        tokens,
                    });
                }
                LayerSpec::MeanPool => {
                    layers.push(LayerDims::MeanPool { tokens });
                    tokens = 1;
                }
            }
        }
        if tokens != 1 {
            return Err(NetworkError::Invalid(
                "sequence inputs must be reduced with a mean_pool layer".into(),
            ));
        }
        let layout = Layout {
            dims,
            layers,
            terms,
            output_dim: stream,
        };
        if layout.dims[layout.output_dim].search.is_some() {
            return Err(NetworkError::Invalid(format!(
                "output dimension `{}` cannot be searchable",
                layout.dims[layout.output_dim].name
            )));
        }
        self.check_groups(&layout)?;
        Ok(layout)
    }

    fn check_groups(&self, layout: &Layout) -> Result<(), NetworkError> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (gi, group) in self.groups.iter().enumerate() {
            if group.len() < 2 {
                return Err(NetworkError::Invalid(format!(
                    "group {gi} needs at least two members"
                )));
            }
            let mut first: Option<&DimInfo> = None;
            for member in group {
                let idx = layout
                    .dim_index(member)
                    .ok_or_else(|| NetworkError::UnknownDim(member.clone()))?;
                if let Some(prev) = seen.insert(member.as_str(), gi) {
                    return Err(NetworkError::Invalid(format!(
                        "`{member}` appears in groups {prev} and {gi}"
                    )));
                }
                let d = &layout.dims[idx];
                if d.search.is_none() {
                    return Err(NetworkError::Invalid(format!(
                        "group member `{member}` is not searchable"
                    )));
                }
                match first {
                    None => first = Some(d),
                    Some(f) if f.size != d.size => {
                        return Err(NetworkError::GroupSizeMismatch {
                            first: f.name.clone(),
                            first_size: f.size,
                            member: d.name.clone(),
                            size: d.size,
                        })
                    }
                    Some(f) if f.kind != d.kind || f.search != d.search => {
                        return Err(NetworkError::Invalid(format!(
                            "group members `{}` and `{}` differ in kind or search settings",
                            f.name, d.name
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Exact per-sample count of a discrete resource over the full spec.
    pub fn count(&self, kind: ResourceKind) -> Result<f64, NetworkError> {
        if kind == ResourceKind::Latency {
            return Err(NetworkError::NotCountable(kind));
        }
        let layout = self.layout()?;
        let rho = vec![1.0; layout.dims.len()];
        Ok(layout.terms.iter().map(|t| t.evaluate(kind, &rho, 1.0)).sum())
    }

    /// Output width of the model.
    pub fn output_features(&self) -> Result<usize, NetworkError> {
        let layout = self.layout()?;
        Ok(layout.dims[layout.output_dim].size)
    }
}
