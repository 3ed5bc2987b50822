use std::sync::atomic::{AtomicU64, Ordering};

use super::{check_finite, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node on one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Relu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    RowAttention {
        query: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        // [rows × experts], row-major
        weights: Vec<f64>,
        scale: f64,
    },
    Mixture {
        weights: Var,
        values: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are stored in creation order, which is also the
/// topological order used by [`Graph::backward`].
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.rows(), t.cols()))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id {
            return Err(TensorError::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(TensorError::ForeignVar)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("variable belongs to this graph").value
    }

    /// Records `t` as a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(&t.with_requires_grad(false))
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (m, k) = require_rank2("matmul", ta)?;
        let (k2, n) = require_rank2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::raw(vec![m, n], out);
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.node(x)?.value, &self.node(bias)?.value);
        let (_, n) = require_rank2("add_bias", tx)?;
        if tb.numel() != n {
            return Err(mismatch("add_bias", tx, tb));
        }
        let out: Vec<f64> = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::raw(tx.shape().to_vec(), out);
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::raw(ta.shape().to_vec(), out);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::raw(ta.shape().to_vec(), out);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let out = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::raw(tx.shape().to_vec(), out);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (m, n) = require_rank2("transpose", tx)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = tx.data()[i * n + j];
            }
        }
        let value = Tensor::raw(vec![n, m], out);
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let out = tx.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::raw(tx.shape().to_vec(), out);
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        if axis >= tx.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: tx.rank(),
            });
        }
        let (outer, len, inner) = axis_layout(tx.shape(), axis);
        let mut out = tx.data().to_vec();
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for j in 0..inner {
                for i in 0..len {
                    lane[i] = out[(o * len + i) * inner + j];
                }
                softmax_in_place(&mut lane);
                for i in 0..len {
                    out[(o * len + i) * inner + j] = lane[i];
                }
            }
        }
        let value = Tensor::raw(tx.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax { input: x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.node(x)?.value.data().iter().sum();
        self.push("sum", Tensor::raw(vec![1], vec![total]), Op::Sum(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = &self.node(logits)?.value;
        let (b, c) = require_rank2("cross_entropy", tl)?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= b as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(
            "cross_entropy",
            Tensor::raw(vec![1], vec![loss]),
            op,
            &[logits],
        )
    }

    /// Horizontal concatenation of `[m×c_i]` tensors.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::EmptyExpertSet)?;
        let m = require_rank2("concat_cols", &self.node(*first)?.value)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.node(p)?.value;
            let (rows, cols) = require_rank2("concat_cols", t)?;
            if rows != m {
                return Err(mismatch("concat_cols", &self.node(*first)?.value, t));
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.index].value.row(r));
            }
        }
        let value = Tensor::raw(vec![m, total], out);
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Single-query scaled dot-product attention, `softmax(q·kᵀ/√d)·v`, built
    /// from primitive ops. `q: [1×d]`, `k: [E×d]`, `v: [E×C]`.
    pub fn scaled_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (tq, tk, tv) = (
            &self.node(q)?.value,
            &self.node(k)?.value,
            &self.node(v)?.value,
        );
        let (qr, d) = require_rank2("scaled_attention", tq)?;
        let (e, kd) = require_rank2("scaled_attention", tk)?;
        let (ve, _) = require_rank2("scaled_attention", tv)?;
        if qr != 1 || kd != d {
            return Err(mismatch("scaled_attention", tq, tk));
        }
        if ve != e {
            return Err(mismatch("scaled_attention", tk, tv));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let weights = self.softmax(scores, 1)?;
        self.matmul(weights, v)
    }

    /// Row-independent attention fused into one node. For each row `r`, the
    /// query `query[r]` attends over keys `keys[e][r]` and mixes `values[e][r]`.
    /// `query: [B×d]`, each key `[B×d]`, each value `[B×C]`.
    pub fn row_attention(&mut self, query: Var, keys: &[Var], values: &[Var]) -> Result<Var> {
        if keys.is_empty() {
            return Err(TensorError::EmptyExpertSet);
        }
        let tq = &self.node(query)?.value;
        let (b, d) = require_rank2("row_attention", tq)?;
        if keys.len() != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "row_attention",
                left: vec![keys.len()],
                right: vec![values.len()],
            });
        }
        let c = require_rank2("row_attention", &self.node(values[0])?.value)?.1;
        for (&k, &v) in keys.iter().zip(values) {
            let (tk, tv) = (&self.node(k)?.value, &self.node(v)?.value);
            if tk.shape() != [b, d] {
                return Err(mismatch("row_attention", tq, tk));
            }
            if tv.shape() != [b, c] {
                return Err(mismatch("row_attention", tk, tv));
            }
        }
        let e = keys.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut weights = vec![0.0; b * e];
        let mut out = vec![0.0; b * c];
        for r in 0..b {
            let q = tq.row(r);
            let w = &mut weights[r * e..(r + 1) * e];
            for (slot, &k) in w.iter_mut().zip(keys) {
                let kr = self.nodes[k.index].value.row(r);
                *slot = q.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(w);
            let o = &mut out[r * c..(r + 1) * c];
            for (&we, &v) in w.iter().zip(values) {
                for (slot, vv) in o.iter_mut().zip(self.nodes[v.index].value.row(r)) {
                    *slot += we * vv;
                }
            }
        }
        let value = Tensor::raw(vec![b, c], out);
        let mut inputs = vec![query];
        inputs.extend_from_slice(keys);
        inputs.extend_from_slice(values);
        let op = Op::RowAttention {
            query,
            keys: keys.to_vec(),
            values: values.to_vec(),
            weights,
            scale,
        };
        self.push("row_attention", value, op, &inputs)
    }

    /// Per-row convex mixture: `out[r] = Σ_e weights[r, e] · values[e][r]`.
    pub fn mixture(&mut self, weights: Var, values: &[Var]) -> Result<Var> {
        if values.is_empty() {
            return Err(TensorError::EmptyExpertSet);
        }
        let tw = &self.node(weights)?.value;
        let (b, e) = require_rank2("mixture", tw)?;
        if e != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mixture",
                left: tw.shape().to_vec(),
                right: vec![values.len()],
            });
        }
        let c = require_rank2("mixture", &self.node(values[0])?.value)?.1;
        for &v in values {
            let tv = &self.node(v)?.value;
            if tv.shape() != [b, c] {
                return Err(mismatch("mixture", tw, tv));
            }
        }
        let mut out = vec![0.0; b * c];
        for r in 0..b {
            for (ei, &v) in values.iter().enumerate() {
                let w = tw.data()[r * e + ei];
                for (slot, vv) in out[r * c..(r + 1) * c]
                    .iter_mut()
                    .zip(self.nodes[v.index].value.row(r))
                {
                    *slot += w * vv;
                }
            }
        }
        let value = Tensor::raw(vec![b, c], out);
        let mut inputs = vec![weights];
        inputs.extend_from_slice(values);
        let op = Op::Mixture {
            weights,
            values: values.to_vec(),
        };
        self.push("mixture", value, op, &inputs)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.index].value;
        let mut acc = |v: Var, delta: Vec<f64>| -> Result<()> {
            check_finite("backward", &delta)?;
            match &mut grads[v.index] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] =
                                (0..n).map(|j| g[i * n + j] * tb.data()[p * n + j]).sum();
                        }
                    }
                    acc(*a, da)?;
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    acc(*b, db)?;
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    acc(*x, g.to_vec())?;
                }
                if self.wants(*bias) {
                    let n = val(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    acc(*bias, db)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec())?;
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec())?;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.wants(*a) {
                    acc(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect())?;
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect())?;
                }
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|v| v * f).collect())?,
            Op::Transpose(x) => {
                let tx = val(*x);
                let (m, n) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                acc(*x, dx)?;
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, dx)?;
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                acc(*input, dx)?;
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).numel()])?,
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).cols();
                let b = labels.len() as f64;
                let mut dx = probs.clone();
                for (row, &label) in dx.chunks_mut(c).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g[0] / b);
                }
                acc(*logits, dx)?;
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = (val(p).rows(), val(p).cols());
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, dp)?;
                    }
                    offset += w;
                }
            }
            Op::RowAttention {
                query,
                keys,
                values,
                weights,
                scale,
            } => {
                let tq = val(*query);
                let (b, d) = (tq.rows(), tq.cols());
                let c = node.value.cols();
                let e = keys.len();
                // dL/ds[r, e] = a_e (g·v_e − Σ_f a_f g·v_f)
                let mut ds = vec![0.0; b * e];
                for r in 0..b {
                    let gr = &g[r * c..(r + 1) * c];
                    let w = &weights[r * e..(r + 1) * e];
                    let da: Vec<f64> = values
                        .iter()
                        .map(|&v| gr.iter().zip(val(v).row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    let mean: f64 = w.iter().zip(&da).map(|(a, d)| a * d).sum();
                    for ei in 0..e {
                        ds[r * e + ei] = w[ei] * (da[ei] - mean);
                    }
                }
                if self.wants(*query) {
                    let mut dq = vec![0.0; b * d];
                    for r in 0..b {
                        for (ei, &k) in keys.iter().enumerate() {
                            let coef = ds[r * e + ei] * scale;
                            for (slot, kv) in dq[r * d..(r + 1) * d].iter_mut().zip(val(k).row(r)) {
                                *slot += coef * kv;
                            }
                        }
                    }
                    acc(*query, dq)?;
                }
                for (ei, &k) in keys.iter().enumerate() {
                    if self.wants(k) {
                        let mut dk = vec![0.0; b * d];
                        for r in 0..b {
                            let coef = ds[r * e + ei] * scale;
                            for (slot, qv) in dk[r * d..(r + 1) * d].iter_mut().zip(tq.row(r)) {
                                *slot = coef * qv;
                            }
                        }
                        acc(k, dk)?;
                    }
                }
                for (ei, &v) in values.iter().enumerate() {
                    if self.wants(v) {
                        let mut dv = vec![0.0; b * c];
                        for r in 0..b {
                            let w = weights[r * e + ei];
                            for (slot, gv) in dv[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..]) {
                                *slot = w * gv;
                            }
                        }
                        acc(v, dv)?;
                    }
                }
            }
            Op::Mixture { weights, values } => {
                let tw = val(*weights);
                let (b, e) = (tw.rows(), tw.cols());
                let c = node.value.cols();
                if self.wants(*weights) {
                    let mut dw = vec![0.0; b * e];
                    for r in 0..b {
                        for (ei, &v) in values.iter().enumerate() {
                            dw[r * e + ei] = g[r * c..(r + 1) * c]
                                .iter()
                                .zip(val(v).row(r))
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    acc(*weights, dw)?;
                }
                for (ei, &v) in values.iter().enumerate() {
                    if self.wants(v) {
                        let mut dv = vec![0.0; b * c];
                        for r in 0..b {
                            let w = tw.data()[r * e + ei];
                            for (slot, gv) in dv[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..]) {
                                *slot = w * gv;
                            }
                        }
                        acc(v, dv)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`]: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of leaf `v` into `t` when `t` requires grad.
    /// A trainable leaf the loss does not depend on receives zeros.
    pub fn write_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if v.graph != self.graph {
            return Err(TensorError::ForeignVar);
        }
        if !t.requires_grad() {
            return Ok(());
        }
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}
