use super::kernels::{
    broadcast_shape, for_each_broadcast, gemm, gemm_nt_acc, gemm_tn_acc, inverse_permutation,
    permute,
};
use super::tensor::Tensor;
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    Reshape(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Permute { .. } => "permute",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations for one forward/backward episode.
///
/// Nodes are appended in evaluation order, so every parent id precedes its
/// children and the insertion order is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the root or
    /// was not recorded on the differentiated graph.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient values for `v`, zero-filled to `len` when absent.
    pub fn values_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map_or_else(|| vec![0.0; len], |t| t.data().to_vec())
    }

    /// Scalar gradient for a single-element node, zero when absent.
    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v).map_or(0.0, |t| t.data()[0])
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, kind: &'static str) -> Result<(Vec<usize>, Vec<f64>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: kind,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; out.iter().product()];
        let f: fn(f64, f64) -> f64 = match kind {
            "add" => |x, y| x + y,
            "sub" => |x, y| x - y,
            _ => |x, y| x * y,
        };
        for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
        Ok((out, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "add")?;
        Ok(self.derived(Tensor::new(shape, data)?, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "sub")?;
        Ok(self.derived(Tensor::new(shape, data)?, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product; size-1 axes of either operand are expanded.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "mul")?;
        Ok(self.derived(Tensor::new(shape, data)?, Op::Mul(a, b), &[a, b]))
    }

    /// Matrix product over the last two axes. Leading (batch) axes must match
    /// exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * k * n..(bi + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.derived(Tensor::new(out_shape, data)?, Op::MatMul(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("unary keeps shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, sigmoid);
        Ok(self.derived(out, Op::Sigmoid(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, |v| if v < 0.0 { 0.0 } else { v });
        Ok(self.derived(out, Op::Relu(x), &[x]))
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                value: bad,
            });
        }
        let out = self.unary(x, f64::ln);
        Ok(self.derived(out, Op::Log(x), &[x]))
    }

    /// Exponential; rejected when any result overflows.
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, f64::exp);
        if let Some(i) = out.data().iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::Domain {
                op: "exp",
                value: self.value(x).data()[i],
            });
        }
        Ok(self.derived(out, Op::Exp(x), &[x]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.derived(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.derived(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.unary(x, |v| v * factor);
        Ok(self.derived(out, Op::Scale(x, factor), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(shape.to_vec(), t.data().to_vec()).map_err(|_| {
            AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            }
        })?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(AutodiffError::BadSlice {
                shape,
                axis,
                start,
                end,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.derived(
            out,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            &[x],
        ))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..t.shape().len()).collect::<Vec<_>>() {
            return Err(AutodiffError::BadPermutation {
                shape: t.shape().to_vec(),
                perm: perm.to_vec(),
            });
        }
        let (shape, data) = permute(t.data(), t.shape(), perm);
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(
            out,
            Op::Permute {
                input: x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().expect("rank >= 1");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(width) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Softmax(x), &[x]))
    }

    /// Mean cross-entropy of `(batch, classes)` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let shape = t.shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            softmax_in_place(row);
            let p = row[label];
            loss -= if p.is_nan() { p } else { p.max(f64::MIN_POSITIVE).ln() };
        }
        loss /= labels.len() as f64;
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `root`, accumulating gradients additively
    /// across all paths.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape matches value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot =
            grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                self.accumulate(grads, *a, |ga| {
                    for_each_broadcast(out_shape, &sa, &sb, |o, i, _| ga[i] += g[o]);
                });
                self.accumulate(grads, *b, |gb| {
                    for_each_broadcast(out_shape, &sa, &sb, |o, _, j| gb[j] += sign * g[o]);
                });
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| ga[i] += g[o] * db[j]);
                });
                self.accumulate(grads, *b, |gb| {
                    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| gb[j] += g[o] * da[i]);
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = matmul_dims(sa, sb).expect("validated in forward");
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..batch {
                        gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for bi in 0..batch {
                        gemm_tn_acc(
                            &da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi / xi;
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |gx| {
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o += gi * c;
                }
            }),
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| {
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o += gi;
                }
            }),
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let width = out_shape[*axis] * inner;
                let in_len = in_shape[*axis];
                self.accumulate(grads, *input, |gx| {
                    for o in 0..outer {
                        let dst = o * in_len * inner + start * inner;
                        for (d, &s) in gx[dst..dst + width].iter_mut().zip(&g[o * width..]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Permute { input, perm } => {
                let inv = inverse_permutation(perm);
                let (_, back) = permute(g, out_shape, &inv);
                self.accumulate(grads, *input, |gx| {
                    for (o, v) in gx.iter_mut().zip(back) {
                        *o += v;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let width = *out_shape.last().expect("rank >= 1");
                self.accumulate(grads, *x, |gx| {
                    for ((go, gi), yi) in gx
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(y.chunks(width))
                    {
                        let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in go.iter_mut().zip(gi).zip(yi) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |gx| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gx[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let mismatch = || AutodiffError::ShapeMismatch {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sa.len() != sb.len() {
        return Err(mismatch());
    }
    let r = sa.len();
    if sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
        return Err(mismatch());
    }
    let batch = sa[..r - 2].iter().product();
    Ok((batch, sa[r - 2], sa[r - 1], sb[r - 1]))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
