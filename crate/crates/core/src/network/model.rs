use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureDescription, DimEntry, Provenance};
use super::spec::{Activation, LayerDims, LayerSpec, Layout, ModelSpec, Widths};
use super::NetworkError;
use crate::autodiff::{Graph, Tensor, Var};
use crate::topk::{ImportanceMetric, Normalization, TopkOperator};

type Result<T> = std::result::Result<T, NetworkError>;

/// Operator settings applied to every searchable dimension at build time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorOptions {
    pub metric: ImportanceMetric,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
enum LayerParams {
    Linear {
        weight: usize,
        bias: usize,
        activation: Activation,
    },
    Residual {
        blocks: Vec<[usize; 4]>,
    },
    Attention {
        // q, k, v, o weights and biases interleaved
        params: [usize; 8],
        heads: usize,
        qk_dim: usize,
        v_dim: usize,
        scale: f64,
    },
    MeanPool,
}

/// Where the masks of a forward pass come from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// Soft masks from each operator's current `a` and importance.
    Soft,
    /// Every mask forced to exactly one.
    Ones,
    /// Constant element masks, one vector per operator.
    Fixed(&'a [Vec<f64>]),
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<Var>,
    /// `[1]` pruning-ratio leaves, one per operator.
    pub a: Vec<Var>,
    /// `[U]` unit masks, one per operator.
    pub unit_masks: Vec<Var>,
    /// `[1, N]` element masks, one per operator.
    pub element_masks: Vec<Var>,
}

/// Layer graph whose widths, depths, and head counts may be gated by
/// [`TopkOperator`] masks. A network without operators is a plain discrete
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    layout: Layout,
    dim_op: Vec<Option<usize>>,
    pub operators: Vec<TopkOperator>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    layers: Vec<LayerParams>,
}

impl Network {
    /// Builds a supernet with one operator per searchable dimension (shared
    /// within declared groups) and seeded fan-in uniform weights.
    pub fn build<R: Rng>(spec: &ModelSpec, rng: &mut R, opts: OperatorOptions) -> Result<Self> {
        let mut net = Self::skeleton(spec, opts)?;
        // weights are (fan_in, fan_out); each bias follows its weight and
        // shares that fan-in
        let mut fan_in = 1;
        for (t, name) in net.params.iter_mut().zip(&net.param_names) {
            if name.ends_with(".weight") {
                fan_in = t.shape()[0];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Rebuilds a network from saved parts, checking every shape.
    pub fn from_parts(
        spec: &ModelSpec,
        params: Vec<Tensor>,
        operators: Vec<TopkOperator>,
    ) -> Result<Self> {
        let mut net = Self::skeleton(spec, OperatorOptions::default())?;
        if operators.len() != net.operators.len() {
            return Err(NetworkError::Invalid(format!(
                "expected {} operators, got {}",
                net.operators.len(),
                operators.len()
            )));
        }
        for (have, want) in operators.iter().zip(&net.operators) {
            if have.name != want.name || have.n != want.n || have.units() != want.units() {
                return Err(NetworkError::Invalid(format!(
                    "operator `{}` does not match `{}`",
                    have.name, want.name
                )));
            }
        }
        net.operators = operators;
        net.set_params(params)?;
        Ok(net)
    }

    /// Operators and correctly shaped zero weights.
    pub fn skeleton(spec: &ModelSpec, opts: OperatorOptions) -> Result<Self> {
        let layout = spec.layout()?;
        let mut operators: Vec<TopkOperator> = Vec::new();
        let mut dim_op = vec![None; layout.dims.len()];
        for (i, d) in layout.dims.iter().enumerate() {
            let Some(search) = d.search else { continue };
            if dim_op[i].is_some() {
                continue;
            }
            let members: Vec<usize> = spec
                .groups
                .iter()
                .find(|g| g.contains(&d.name))
                .map(|g| g.iter().filter_map(|m| layout.dim_index(m)).collect())
                .unwrap_or_else(|| vec![i]);
            let op = TopkOperator::new(d.name.clone(), d.kind, d.size, search.step, search.min)?
                .with_metric(opts.metric)
                .with_normalization(opts.normalization);
            for m in members {
                dim_op[m] = Some(operators.len());
            }
            operators.push(op);
        }

        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut push = |name: String, shape: &[usize]| {
            params.push(Tensor::zeros(shape));
            names.push(name);
            params.len() - 1
        };
        let mut layers = Vec::new();
        for (ls, ld) in spec.layers.iter().zip(&layout.layers) {
            let size = |d: usize| layout.dims[d].size;
            let lp = match (ls, ld) {
                (
                    LayerSpec::Linear {
                        name, activation, ..
                    },
                    LayerDims::Linear { input, output },
                ) => LayerParams::Linear {
                    weight: push(format!("{name}.weight"), &[size(*input), size(*output)]),
                    bias: push(format!("{name}.bias"), &[1, size(*output)]),
                    activation: *activation,
                },
                (LayerSpec::Residual { name, .. }, LayerDims::Residual { stream, hidden, .. }) => {
                    let s = size(*stream);
                    let blocks = hidden
                        .iter()
                        .enumerate()
                        .map(|(j, &h)| {
                            let h = size(h);
                            [
                                push(format!("{name}.{j}.fc1.weight"), &[s, h]),
                                push(format!("{name}.{j}.fc1.bias"), &[1, h]),
                                push(format!("{name}.{j}.fc2.weight"), &[h, s]),
                                push(format!("{name}.{j}.fc2.bias"), &[1, s]),
                            ]
                        })
                        .collect();
                    LayerParams::Residual { blocks }
                }
                (
                    LayerSpec::Attention {
                        name,
                        heads,
                        qk_dim,
                        v_dim,
                        scale,
                        ..
                    },
                    LayerDims::Attention { stream, .. },
                ) => {
                    let e = size(*stream);
                    let p = [
                        push(format!("{name}.q.weight"), &[e, heads * qk_dim]),
                        push(format!("{name}.q.bias"), &[1, heads * qk_dim]),
                        push(format!("{name}.k.weight"), &[e, heads * qk_dim]),
                        push(format!("{name}.k.bias"), &[1, heads * qk_dim]),
                        push(format!("{name}.v.weight"), &[e, heads * v_dim]),
                        push(format!("{name}.v.bias"), &[1, heads * v_dim]),
                        push(format!("{name}.o.weight"), &[heads * v_dim, e]),
                        push(format!("{name}.o.bias"), &[1, e]),
                    ];
                    LayerParams::Attention {
                        params: p,
                        heads: *heads,
                        qk_dim: *qk_dim,
                        v_dim: *v_dim,
                        scale: scale.unwrap_or(1.0 / (*qk_dim as f64).sqrt()),
                    }
                }
                (LayerSpec::MeanPool, LayerDims::MeanPool { .. }) => LayerParams::MeanPool,
                _ => unreachable!("layout mirrors the layer list"),
            };
            layers.push(lp);
        }
        Ok(Self {
            spec: spec.clone(),
            layout,
            dim_op,
            operators,
            params,
            param_names: names,
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    /// Replaces all weights; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NetworkError::Invalid(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((new, old), name) in params.iter().zip(&self.params).zip(&self.param_names) {
            if new.shape() != old.shape() {
                return Err(NetworkError::Invalid(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Operator gating dimension `dim`, if any.
    pub fn dim_operator(&self, dim: usize) -> Option<usize> {
        self.dim_op[dim]
    }

    pub fn operator_index(&self, name: &str) -> Option<usize> {
        self.operators.iter().position(|o| o.name == name)
    }

    pub fn is_discrete(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn input_features(&self) -> usize {
        self.spec.input_dim
    }

    /// Records parameters and masks on `g`.
    pub fn bind(
        &self,
        g: &mut Graph,
        train_weights: bool,
        masks: MaskSource<'_>,
    ) -> Result<Bound> {
        let params = self
            .params
            .iter()
            .map(|t| g.leaf(t.clone(), train_weights))
            .collect();
        let mut bound = Bound {
            params,
            a: Vec::new(),
            unit_masks: Vec::new(),
            element_masks: Vec::new(),
        };
        for (i, op) in self.operators.iter().enumerate() {
            let (a, unit, elem) = match masks {
                MaskSource::Soft => {
                    let a = g.param(Tensor::scalar(op.a));
                    let unit = op.unit_mask_var(g, a)?;
                    let elem = op.element_mask_var(g, unit)?;
                    (a, unit, elem)
                }
                MaskSource::Ones | MaskSource::Fixed(_) => {
                    let values = match masks {
                        MaskSource::Fixed(m) => {
                            let v = m.get(i).ok_or_else(|| {
                                NetworkError::Invalid(format!("no fixed mask for operator {i}"))
                            })?;
                            if v.len() != op.n {
                                return Err(NetworkError::Invalid(format!(
                                    "fixed mask for `{}` has {} values, expected {}",
                                    op.name,
                                    v.len(),
                                    op.n
                                )));
                            }
                            v.clone()
                        }
                        _ => vec![1.0; op.n],
                    };
                    let unit_values: Vec<f64> = (0..op.units())
                        .map(|u| values[op.unit_members(u).start])
                        .collect();
                    let a = g.constant(Tensor::scalar(op.a));
                    let unit = g.constant(Tensor::vector(unit_values));
                    let elem = g.constant(Tensor::new(vec![1, op.n], values)?);
                    (a, unit, elem)
                }
            };
            bound.a.push(a);
            bound.unit_masks.push(unit);
            bound.element_masks.push(elem);
        }
        Ok(bound)
    }

    fn gate_features(&self, g: &mut Graph, b: &Bound, x: Var, dim: usize) -> Result<Var> {
        match self.dim_op[dim] {
            Some(op) => Ok(g.mul(x, b.element_masks[op])?),
            None => Ok(x),
        }
    }

    fn reshaped_mask(
        &self,
        g: &mut Graph,
        b: &Bound,
        dim: usize,
        shape: &[usize],
    ) -> Result<Option<Var>> {
        match self.dim_op[dim] {
            Some(op) => Ok(Some(g.reshape(b.element_masks[op], shape)?)),
            None => Ok(None),
        }
    }

    /// Masked forward pass on a `(rows, input_dim)` batch, where rows are
    /// `batch * seq_len` tokens.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.spec.input_dim || !shape[0].is_multiple_of(self.spec.seq_len)
        {
            return Err(NetworkError::InputShape {
                expected: vec![self.spec.seq_len, self.spec.input_dim],
                got: shape,
            });
        }
        let mut rows = shape[0];
        let mut h = x;
        for (lp, ld) in self.layers.iter().zip(&self.layout.layers) {
            h = match (lp, ld) {
                (
                    LayerParams::Linear {
                        weight,
                        bias,
                        activation,
                    },
                    LayerDims::Linear { input, .. },
                ) => {
                    let xin = self.gate_features(g, b, h, *input)?;
                    let y = g.matmul(xin, b.params[*weight])?;
                    let y = g.add(y, b.params[*bias])?;
                    match activation {
                        Activation::Relu => g.relu(y)?,
                        Activation::None => y,
                    }
                }
                (
                    LayerParams::Residual { blocks },
                    LayerDims::Residual {
                        stream,
                        depth,
                        hidden,
                    },
                ) => {
                    let mut cur = h;
                    for (j, (p, &hid)) in blocks.iter().zip(hidden).enumerate() {
                        let xm = self.gate_features(g, b, cur, *stream)?;
                        let z = g.matmul(xm, b.params[p[0]])?;
                        let z = g.add(z, b.params[p[1]])?;
                        let z = g.relu(z)?;
                        let z = self.gate_features(g, b, z, hid)?;
                        let f = g.matmul(z, b.params[p[2]])?;
                        let f = g.add(f, b.params[p[3]])?;
                        let f = match self.dim_op[*depth] {
                            Some(op) => {
                                let m = g.slice(b.unit_masks[op], 0, j, j + 1)?;
                                let m = g.reshape(m, &[1, 1])?;
                                g.mul(f, m)?
                            }
                            None => f,
                        };
                        cur = g.add(xm, f)?;
                    }
                    cur
                }
                (
                    LayerParams::Attention {
                        params: p,
                        heads,
                        qk_dim,
                        v_dim,
                        scale,
                    },
                    LayerDims::Attention {
                        stream,
                        heads: hd,
                        qk,
                        v,
                        tokens,
                    },
                ) => {
                    let (hn, l) = (*heads, *tokens);
                    let batch = rows / l;
                    let xm = self.gate_features(g, b, h, *stream)?;
                    let head_mask = self.reshaped_mask(g, b, *hd, &[1, hn, 1, 1])?;
                    let project = |g: &mut Graph, w: usize, bias: usize, d: usize, dim: usize| {
                        let y = g.matmul(xm, b.params[w])?;
                        let y = g.add(y, b.params[bias])?;
                        let y = g.reshape(y, &[batch, l, hn, d])?;
                        let mut y = g.permute(y, &[0, 2, 1, 3])?;
                        if let Some(m) = self.reshaped_mask(g, b, dim, &[1, 1, 1, d])? {
                            y = g.mul(y, m)?;
                        }
                        if let Some(m) = head_mask {
                            y = g.mul(y, m)?;
                        }
                        Ok::<Var, NetworkError>(y)
                    };
                    let q = project(g, p[0], p[1], *qk_dim, *qk)?;
                    let k = project(g, p[2], p[3], *qk_dim, *qk)?;
                    let vv = project(g, p[4], p[5], *v_dim, *v)?;
                    let kt = g.permute(k, &[0, 1, 3, 2])?;
                    let scores = g.matmul(q, kt)?;
                    let scores = g.scale(scores, *scale)?;
                    let attn = g.softmax(scores)?;
                    let mixed = g.matmul(attn, vv)?;
                    let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
                    let mixed = g.reshape(mixed, &[rows, hn * v_dim])?;
                    let out = g.matmul(mixed, b.params[p[6]])?;
                    let out = g.add(out, b.params[p[7]])?;
                    g.add(xm, out)?
                }
                (LayerParams::MeanPool, LayerDims::MeanPool { tokens }) => {
                    let batch = rows / tokens;
                    let mut pool = vec![0.0; batch * rows];
                    for s in 0..batch {
                        for t in 0..*tokens {
                            pool[s * rows + s * tokens + t] = 1.0 / *tokens as f64;
                        }
                    }
                    let pool = g.constant(Tensor::new(vec![batch, rows], pool)?);
                    rows = batch;
                    g.matmul(pool, h)?
                }
                _ => unreachable!("layer params mirror the layout"),
            };
        }
        Ok(h)
    }

    /// Forward without gradients; returns the output tensor.
    pub fn predict(&self, x: &Tensor, masks: MaskSource<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, masks)?;
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv)?;
        Ok(g.value(y).clone())
    }

    /// Retained element indices of every dimension.
    pub fn retained(&self) -> Result<Vec<Vec<usize>>> {
        self.layout
            .dims
            .iter()
            .enumerate()
            .map(|(i, d)| match self.dim_op[i] {
                Some(op) => Ok(self.operators[op].retained_indices()?),
                None => Ok((0..d.size).collect()),
            })
            .collect()
    }

    /// Prunes every dimension to its `element_count` most important elements
    /// and drops unretained residual blocks, returning the description and a
    /// discrete model carrying the corresponding weight slices.
    pub fn export_pruned(&self) -> Result<(ArchitectureDescription, Network)> {
        let retained = self.retained()?;
        let dims = &self.layout.dims;
        let mut layers = Vec::with_capacity(self.spec.layers.len());
        for (ls, ld) in self.spec.layers.iter().zip(&self.layout.layers) {
            let discrete = match (ls, ld) {
                (
                    LayerSpec::Linear {
                        name, activation, ..
                    },
                    LayerDims::Linear { output, .. },
                ) => LayerSpec::Linear {
                    name: name.clone(),
                    out_features: retained[*output].len(),
                    activation: *activation,
                    search: None,
                },
                (LayerSpec::Residual { name, .. }, LayerDims::Residual { depth, hidden, .. }) => {
                    let widths: Vec<usize> =
                        retained[*depth].iter().map(|&j| retained[hidden[j]].len()).collect();
                    LayerSpec::Residual {
                        name: name.clone(),
                        blocks: widths.len(),
                        hidden: Widths::PerBlock(widths),
                        hidden_search: None,
                        depth_search: None,
                    }
                }
                (
                    LayerSpec::Attention { name, qk_dim, scale, .. },
                    LayerDims::Attention { heads, qk, v, .. },
                ) => LayerSpec::Attention {
                    name: name.clone(),
                    heads: retained[*heads].len(),
                    qk_dim: retained[*qk].len(),
                    v_dim: retained[*v].len(),
                    scale: Some(scale.unwrap_or(1.0 / (*qk_dim as f64).sqrt())),
                    head_search: None,
                    qk_search: None,
                    v_search: None,
                },
                (LayerSpec::MeanPool, _) => LayerSpec::MeanPool,
                _ => unreachable!("layout mirrors the layer list"),
            };
            layers.push(discrete);
        }
        let discrete_spec = ModelSpec {
            input_dim: retained[0].len(),
            seq_len: self.spec.seq_len,
            input_search: None,
            layers,
            groups: Vec::new(),
        };

        let mut out = Network::skeleton(&discrete_spec, OperatorOptions::default())?;
        let mut new_params = Vec::with_capacity(out.params.len());
        for (lp, ld) in self.layers.iter().zip(&self.layout.layers) {
            match (lp, ld) {
                (LayerParams::Linear { weight, bias, .. }, LayerDims::Linear { input, output }) => {
                    new_params.push(slice_matrix(
                        &self.params[*weight],
                        &retained[*input],
                        &retained[*output],
                    ));
                    new_params.push(slice_cols(&self.params[*bias], &retained[*output]));
                }
                (
                    LayerParams::Residual { blocks },
                    LayerDims::Residual {
                        stream,
                        depth,
                        hidden,
                    },
                ) => {
                    let s = &retained[*stream];
                    for &j in &retained[*depth] {
                        let h = &retained[hidden[j]];
                        let p = blocks[j];
                        new_params.push(slice_matrix(&self.params[p[0]], s, h));
                        new_params.push(slice_cols(&self.params[p[1]], h));
                        new_params.push(slice_matrix(&self.params[p[2]], h, s));
                        new_params.push(slice_cols(&self.params[p[3]], s));
                    }
                }
                (
                    LayerParams::Attention {
                        params: p,
                        qk_dim,
                        v_dim,
                        ..
                    },
                    LayerDims::Attention {
                        stream, heads, qk, v, ..
                    },
                ) => {
                    let e = &retained[*stream];
                    let flat = |inner: &[usize], width: usize| -> Vec<usize> {
                        retained[*heads]
                            .iter()
                            .flat_map(|&h| inner.iter().map(move |&d| h * width + d))
                            .collect()
                    };
                    let qk_cols = flat(&retained[*qk], *qk_dim);
                    let v_cols = flat(&retained[*v], *v_dim);
                    for (w, bias, cols) in [(p[0], p[1], &qk_cols), (p[2], p[3], &qk_cols), (p[4], p[5], &v_cols)] {
                        new_params.push(slice_matrix(&self.params[w], e, cols));
                        new_params.push(slice_cols(&self.params[bias], cols));
                    }
                    new_params.push(slice_matrix(&self.params[p[6]], &v_cols, e));
                    new_params.push(slice_cols(&self.params[p[7]], e));
                }
                (LayerParams::MeanPool, _) => {}
                _ => unreachable!("layer params mirror the layout"),
            }
        }
        out.set_params(new_params)?;

        let entries = dims
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let op = self.dim_op[i].map(|o| &self.operators[o]);
                DimEntry {
                    name: d.name.clone(),
                    kind: d.kind,
                    n_max: d.size,
                    k: retained[i].len(),
                    retained: retained[i].clone(),
                    operator: op.map(|o| o.name.clone()),
                    a: op.map(|o| o.a),
                }
            })
            .collect();
        let desc = ArchitectureDescription::new(entries, discrete_spec, Provenance::default())?;
        Ok((desc, out))
    }
}

fn slice_matrix(t: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let width = t.shape()[1];
    let data = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| t.data()[r * width + c]))
        .collect();
    Tensor::new(vec![rows.len(), cols.len()], data).expect("non-empty slices")
}

fn slice_cols(t: &Tensor, cols: &[usize]) -> Tensor {
    slice_matrix(t, &[0], cols)
}
