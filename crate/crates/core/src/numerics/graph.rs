//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Every node holds a matrix value (`rows × cols`). Operations append nodes
//! in evaluation order, so a single reverse sweep visits each node after all
//! of its consumers. The tape also counts multiply-accumulates performed by
//! the matrix products, which the cost model is checked against.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{shape_err, MistError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    AddConst { a: Var },
    Scale { a: Var, s: f64 },
    Mul { a: Var, b: Var },
    Sum { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    NormalizeRows { a: Var, norms: Vec<f64> },
    MeanGroups { a: Var, group: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<usize> },
    LayerNorm { a: Var, gamma: Var, beta: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    SelectBlocks { values: Var, soft: Var, indices: Vec<usize>, block: usize, reference: Option<Tensor> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. One graph is built per forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    macs: u64,
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("operation produced consistent extents")
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiply-accumulates performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Linear { x, w, b } => rg(x) || rg(w) || b.as_ref().is_some_and(rg),
            Op::MatMul { a, b } | Op::MatMulNt { a, b } | Op::Add { a, b } | Op::Mul { a, b } => {
                rg(a) || rg(b)
            }
            Op::AddRow { a, row } => rg(a) || rg(row),
            Op::AddConst { a }
            | Op::Scale { a, .. }
            | Op::Sum { a }
            | Op::Softmax { a }
            | Op::LogSoftmax { a }
            | Op::NormalizeRows { a, .. }
            | Op::MeanGroups { a, .. }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. } => rg(a),
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.iter().any(rg),
            Op::LayerNorm { a, gamma, beta, .. } => rg(a) || rg(gamma) || rg(beta),
            Op::SelectBlocks { values, soft, .. } => rg(values) || rg(soft),
            Op::CrossEntropy { logits, .. } => rg(logits),
        }
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf with optional gradient tracking.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = value.as_matrix();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter leaf. Repeated requests return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    fn require_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `x Wᵀ + b` with `W: out × in`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.shape(x);
        let (dout, win) = self.shape(w);
        if din != win {
            return Err(shape_err("linear", format!("input dim {din} vs weight in-dim {win}")));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, dout) {
                return Err(shape_err("linear", format!("bias {:?} vs out-dim {dout}", self.shape(b))));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xi = &xv[i * din..(i + 1) * din];
            for o in 0..dout {
                let base = bias.map_or(0.0, |bv| bv[o]);
                out[i * dout + o] = base + dot(xi, &wv[o * din..(o + 1) * din]);
            }
        }
        self.macs += (n * din * dout) as u64;
        self.push(mat(n, dout, out), Op::Linear { x, w, b }, "linear")
    }

    /// `A B` with `A: n × k`, `B: k × m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (kb, m) = self.shape(b);
        if k != kb {
            return Err(shape_err("matmul", format!("({n}×{k})·({kb}×{m})")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let oi = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                axpy(oi, av[i * k + p], &bv[p * m..(p + 1) * m]);
            }
        }
        self.macs += (n * k * m) as u64;
        self.push(mat(n, m, out), Op::MatMul { a, b }, "matmul")
    }

    /// `A Bᵀ` with `A: n × k`, `B: m × k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, kb) = self.shape(b);
        if k != kb {
            return Err(shape_err("matmul_nt", format!("({n}×{k})·({m}×{kb})ᵀ")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &av[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(ai, &bv[j * k..(j + 1) * k]);
            }
        }
        self.macs += (n * k * m) as u64;
        self.push(mat(n, m, out), Op::MatMulNt { a, b }, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b }, "add")
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(shape_err("add_row", format!("row {:?} vs cols {c}", self.shape(row))));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(&r) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow { a, row }, "add_row")
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let (r, cols) = self.shape(a);
        if c.rows() != r || c.cols() != cols {
            return Err(shape_err("add_const", format!("{:?} vs {:?}", (r, cols), c.shape())));
        }
        let mut out = self.value(a).clone();
        out.add_assign(c);
        self.push(out, Op::AddConst { a }, "add_const")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale { a, s }, "scale")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same("mul", a, b)?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(&bv).for_each(|(x, y)| *x *= y);
        self.push(out, Op::Mul { a, b }, "mul")
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(mat(1, 1, vec![s]), Op::Sum { a }, "sum")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::Softmax { a }, "softmax")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax { a }, "log_softmax")
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(MistError::Invalid(format!("normalize_rows: row {i} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(out, Op::NormalizeRows { a, norms }, "normalize_rows")
    }

    /// Means of consecutive groups of `group` rows: `(g·group) × c → g × c`.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if group == 0 || r % group != 0 {
            return Err(shape_err("mean_groups", format!("{r} rows in groups of {group}")));
        }
        let av = self.value(a).data();
        let g = r / group;
        let mut out = vec![0.0; g * c];
        for gi in 0..g {
            let o = &mut out[gi * c..(gi + 1) * c];
            for j in 0..group {
                let row = gi * group + j;
                axpy(o, 1.0, &av[row * c..(row + 1) * c]);
            }
            let s = 1.0 / group as f64;
            o.iter_mut().for_each(|v| *v *= s);
        }
        self.push(mat(g, c, out), Op::MeanGroups { a, group }, "mean_groups")
    }

    /// Mean over all rows: `r × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.shape(a);
        self.mean_groups(a, r)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| shape_err("concat_rows", "no parts"))?;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).1 != c {
                return Err(shape_err("concat_rows", "column counts differ"));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c;
        self.push(mat(r, c, data), Op::ConcatRows { parts: parts.to_vec() }, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| shape_err("concat_cols", "no parts"))?;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = vec![0.0; r * c];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            for i in 0..r {
                data[i * c + off..i * c + off + pc].copy_from_slice(t.row(i));
            }
            off += pc;
        }
        self.push(mat(r, c, data), Op::ConcatCols { parts: parts.to_vec() }, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("[{start}, {}) of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push(mat(len, c, data), Op::SliceRows { a, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        self.push(mat(r, len, data), Op::SliceCols { a, start }, "slice_cols")
    }

    /// Rows of `a` at `index`, repeats allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if index.is_empty() || index.iter().any(|&i| i >= r) {
            return Err(shape_err("gather_rows", format!("index out of {r} rows")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            mat(index.len(), c, data),
            Op::GatherRows { a, index: index.to_vec() },
            "gather_rows",
        )
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 × c`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(shape_err("layer_norm", "affine parameters must be 1 × cols"));
        }
        let x = self.value(a).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut normed = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normed[i * c + j] = n;
                out[i * c + j] = gv[j] * n + bv[j];
            }
        }
        self.push(
            mat(r, c, out),
            Op::LayerNorm {
                a,
                gamma,
                beta,
                normed,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Straight-through block selection.
    ///
    /// `values` holds `n` candidate blocks of `block` consecutive rows;
    /// `soft` is `k × n` (one relaxed weight vector per draw). The output
    /// stacks the blocks at `indices`, copied exactly. Gradients reach
    /// `values` through the hard one-hot weights and reach `soft` through
    /// `∂L/∂soft[j][i] = ⟨∂L/∂out_j, block_i⟩`.
    ///
    /// With `reference`, the forward value becomes
    /// `block[idx_j] + Σ_i (soft[j][i] − reference[j][i])·block_i`, a smooth
    /// function whose derivative at `soft == reference` is exactly the
    /// straight-through gradient. Finite-difference checks use this form.
    pub fn select_blocks(
        &mut self,
        values: Var,
        soft: Var,
        indices: &[usize],
        block: usize,
        reference: Option<Tensor>,
    ) -> Result<Var> {
        let (vr, c) = self.shape(values);
        let (k, n) = self.shape(soft);
        if block == 0 || vr != n * block {
            return Err(shape_err(
                "select_blocks",
                format!("{vr} value rows is not {n} blocks of {block}"),
            ));
        }
        if indices.len() != k || indices.iter().any(|&i| i >= n) {
            return Err(shape_err("select_blocks", format!("{k} draws over {n} candidates")));
        }
        if let Some(r) = &reference {
            if r.rows() != k || r.cols() != n {
                return Err(shape_err("select_blocks", "reference weights shape"));
            }
        }
        let bl = block * c;
        let vv = self.value(values).data();
        let mut out = Vec::with_capacity(k * bl);
        for &idx in indices {
            out.extend_from_slice(&vv[idx * bl..(idx + 1) * bl]);
        }
        if let Some(r) = &reference {
            let sv = self.value(soft).data();
            for j in 0..k {
                let oj = &mut out[j * bl..(j + 1) * bl];
                for i in 0..n {
                    let delta = sv[j * n + i] - r.data()[j * n + i];
                    if delta != 0.0 {
                        axpy(oj, delta, &vv[i * bl..(i + 1) * bl]);
                    }
                }
            }
        }
        self.push(
            mat(k * block, c, out),
            Op::SelectBlocks {
                values,
                soft,
                indices: indices.to_vec(),
                block,
                reference,
            },
            "select_blocks",
        )
    }

    /// Softmax cross-entropy of a `1 × A` score row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, a) = self.shape(logits);
        if r != 1 {
            return Err(shape_err("cross_entropy", "expects a single score row"));
        }
        if label >= a {
            return Err(MistError::LabelOutOfRange { label, classes: a });
        }
        let x = self.value(logits).data();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let loss = max + total.ln() - x[label];
        self.push(
            mat(1, 1, vec![loss]),
            Op::CrossEntropy { logits, label, probs },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", "loss must be a single value"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(mat(1, 1, vec![1.0]));
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter in `store`, zero where unused.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .and_then(|&v| self.grad(v))
                    .map(|g| g.clone().reshape(store.get(id).shape().to_vec()).expect("same numel"))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = (xv.rows(), xv.cols());
                let dout = wv.rows();
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * din];
                    for i in 0..n {
                        let dxi = &mut dx[i * din..(i + 1) * din];
                        for o in 0..dout {
                            axpy(dxi, d[i * dout + o], wv.row(o));
                        }
                    }
                    acc(grads, *x, mat(n, din, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    for i in 0..n {
                        let xi = xv.row(i);
                        for o in 0..dout {
                            axpy(&mut dw[o * din..(o + 1) * din], d[i * dout + o], xi);
                        }
                    }
                    acc(grads, *w, mat(dout, din, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; dout];
                        for i in 0..n {
                            axpy(&mut db, 1.0, &d[i * dout..(i + 1) * dout]);
                        }
                        acc(grads, *b, mat(1, dout, db));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            da[i * k + p] = dot(&d[i * m..(i + 1) * m], bv.row(p));
                        }
                    }
                    acc(grads, *a, mat(n, k, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            axpy(&mut db[p * m..(p + 1) * m], av.data()[i * k + p], &d[i * m..(i + 1) * m]);
                        }
                    }
                    acc(grads, *b, mat(k, m, db));
                }
            }
            Op::MatMulNt { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let dai = &mut da[i * k..(i + 1) * k];
                        for j in 0..m {
                            axpy(dai, d[i * m + j], bv.row(j));
                        }
                    }
                    acc(grads, *a, mat(n, k, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; m * k];
                    for i in 0..n {
                        let ai = av.row(i);
                        for j in 0..m {
                            axpy(&mut db[j * k..(j + 1) * k], d[i * m + j], ai);
                        }
                    }
                    acc(grads, *b, mat(m, k, db));
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, dy.clone());
                }
            }
            Op::AddRow { a, row } => {
                if self.wants(*a) {
                    acc(grads, *a, dy.clone());
                }
                if self.wants(*row) {
                    let c = dy.cols();
                    let mut dr = vec![0.0; c];
                    for i in 0..dy.rows() {
                        axpy(&mut dr, 1.0, dy.row(i));
                    }
                    acc(grads, *row, mat(1, c, dr));
                }
            }
            Op::AddConst { a } => acc(grads, *a, dy.clone()),
            Op::Scale { a, s } => acc(grads, *a, dy.map(|v| v * s)),
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let mut g = dy.clone();
                    g.data_mut().iter_mut().zip(self.value(*b).data()).for_each(|(x, y)| *x *= y);
                    acc(grads, *a, g);
                }
                if self.wants(*b) {
                    let mut g = dy.clone();
                    g.data_mut().iter_mut().zip(self.value(*a).data()).for_each(|(x, y)| *x *= y);
                    acc(grads, *b, g);
                }
            }
            Op::Sum { a } => {
                let t = self.value(*a);
                acc(grads, *a, Tensor::filled(&[t.rows(), t.cols()], d[0]));
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let mut g = dy.clone();
                for i in 0..y.rows() {
                    let yi = y.row(i);
                    let s = dot(dy.row(i), yi);
                    for (gj, (dj, yj)) in g.row_mut(i).iter_mut().zip(dy.row(i).iter().zip(yi)) {
                        *gj = yj * (dj - s);
                    }
                }
                acc(grads, *a, g);
            }
            Op::LogSoftmax { a } => {
                let y = &node.value;
                let mut g = dy.clone();
                for i in 0..y.rows() {
                    let total: f64 = dy.row(i).iter().sum();
                    for (gj, yj) in g.row_mut(i).iter_mut().zip(y.row(i)) {
                        *gj -= yj.exp() * total;
                    }
                }
                acc(grads, *a, g);
            }
            Op::NormalizeRows { a, norms } => {
                let y = &node.value;
                let mut g = dy.clone();
                for i in 0..y.rows() {
                    let yi = y.row(i);
                    let s = dot(dy.row(i), yi);
                    for (gj, (dj, yj)) in g.row_mut(i).iter_mut().zip(dy.row(i).iter().zip(yi)) {
                        *gj = (dj - yj * s) / norms[i];
                    }
                }
                acc(grads, *a, g);
            }
            Op::MeanGroups { a, group } => {
                let (r, c) = self.shape(*a);
                let s = 1.0 / *group as f64;
                let mut g = vec![0.0; r * c];
                for row in 0..r {
                    let gi = row / group;
                    axpy(&mut g[row * c..(row + 1) * c], s, dy.row(gi));
                }
                acc(grads, *a, mat(r, c, g));
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.wants(p) {
                        acc(grads, p, mat(r, c, d[off * c..(off + r) * c].to_vec()));
                    }
                    off += r;
                }
            }
            Op::ConcatCols { parts } => {
                let total = dy.cols();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(r * c);
                        for i in 0..r {
                            g.extend_from_slice(&d[i * total + off..i * total + off + c]);
                        }
                        acc(grads, p, mat(r, c, g));
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                let (r, c) = self.shape(*a);
                let mut g = vec![0.0; r * c];
                g[start * c..start * c + d.len()].copy_from_slice(d);
                acc(grads, *a, mat(r, c, g));
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.shape(*a);
                let len = dy.cols();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + len].copy_from_slice(dy.row(i));
                }
                acc(grads, *a, mat(r, c, g));
            }
            Op::GatherRows { a, index } => {
                let (r, c) = self.shape(*a);
                let mut g = vec![0.0; r * c];
                for (j, &i) in index.iter().enumerate() {
                    axpy(&mut g[i * c..(i + 1) * c], 1.0, dy.row(j));
                }
                acc(grads, *a, mat(r, c, g));
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let (r, c) = self.shape(*a);
                let gv = self.value(*gamma).data();
                if self.wants(*a) {
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        let dyi = dy.row(i);
                        let ni = &normed[i * c..(i + 1) * c];
                        let dn: Vec<f64> = dyi.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / c as f64;
                        let mean_dn_n = dot(&dn, ni) / c as f64;
                        for j in 0..c {
                            g[i * c + j] = inv_std[i] * (dn[j] - mean_dn - ni[j] * mean_dn_n);
                        }
                    }
                    acc(grads, *a, mat(r, c, g));
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += d[i * c + j] * normed[i * c + j];
                        }
                    }
                    acc(grads, *gamma, mat(1, c, dg));
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        axpy(&mut db, 1.0, dy.row(i));
                    }
                    acc(grads, *beta, mat(1, c, db));
                }
            }
            Op::SelectBlocks {
                values,
                soft,
                indices,
                block,
                reference,
            } => {
                let vv = self.value(*values);
                let (vr, c) = (vv.rows(), vv.cols());
                let bl = block * c;
                let sv = self.value(*soft);
                let (k, n) = (sv.rows(), sv.cols());
                if self.wants(*values) {
                    let mut g = vec![0.0; vr * c];
                    for (j, &idx) in indices.iter().enumerate() {
                        let dyj = &d[j * bl..(j + 1) * bl];
                        axpy(&mut g[idx * bl..(idx + 1) * bl], 1.0, dyj);
                        if let Some(r) = reference {
                            for i in 0..n {
                                let delta = sv.data()[j * n + i] - r.data()[j * n + i];
                                if delta != 0.0 {
                                    axpy(&mut g[i * bl..(i + 1) * bl], delta, dyj);
                                }
                            }
                        }
                    }
                    acc(grads, *values, mat(vr, c, g));
                }
                if self.wants(*soft) {
                    let mut g = vec![0.0; k * n];
                    for j in 0..k {
                        let dyj = &d[j * bl..(j + 1) * bl];
                        for i in 0..n {
                            g[j * n + i] = dot(dyj, &vv.data()[i * bl..(i + 1) * bl]);
                        }
                    }
                    acc(grads, *soft, mat(k, n, g));
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut g: Vec<f64> = probs.iter().map(|p| p * d[0]).collect();
                g[*label] -= d[0];
                acc(grads, *logits, mat(1, probs.len(), g));
            }
        }
    }
}
