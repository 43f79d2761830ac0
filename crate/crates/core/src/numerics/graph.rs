//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every operation
//! together with its forward value, and replays the tape backwards to produce
//! a [`Gradients`] set. Graphs are cheap and single-use: build one per
//! example, call [`Graph::backward`], drop it.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Embedding { table: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    CopyNll { scores: Var, targets: Vec<Vec<usize>>, probs: Vec<f64>, mass: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-9;

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// A parameter as a graph leaf; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = self.params.value(id).clone();
        self.nodes.push(Node { value, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Gathers rows of an embedding parameter.
    pub fn embedding(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.params.value(table);
        let (rows, cols) = dims(t, "embedding")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange { op: "embedding", index: id, size: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        self.push(value, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = dims(ta, "matmul")?;
        let (k2, m) = dims(tb, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = tensor::matmul_nn(ta.data(), tb.data(), n, k, m);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = dims(ta, "matmul_nt")?;
        let (m, k2) = dims(tb, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let out = tensor::matmul_nt(ta.data(), tb.data(), n, k, m);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMulNT(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), "add")
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (n, m) = dims(ta, "add_row")?;
        if tr.shape() != [1, m] {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for r in 0..n {
            for (x, y) in data[r * m..(r + 1) * m].iter_mut().zip(tr.data()) {
                *x += y;
            }
        }
        self.push(Tensor::matrix(n, m, data)?, Op::AddRow(a, row), "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())?;
        self.push(value, Op::Scale(a, s), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x.max(0.0)).collect())?;
        self.push(value, Op::Relu(a), "relu")
    }

    /// Row-wise softmax. `allowed` (same shape, row-major) zeroes masked
    /// entries; a row with nothing allowed is an error.
    pub fn softmax(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (n, m) = dims(ta, "softmax")?;
        if m == 0 {
            return Err(Error::EmptyInput { op: "softmax" });
        }
        if let Some(mask) = allowed {
            if mask.len() != n * m {
                return Err(Error::ShapeMismatch { op: "softmax", lhs: vec![n, m], rhs: vec![mask.len()] });
            }
        }
        let mut data = ta.data().to_vec();
        for r in 0..n {
            let row_mask = allowed.map(|mk| &mk[r * m..(r + 1) * m]);
            if !tensor::softmax_row(&mut data[r * m..(r + 1) * m], row_mask) {
                return Err(Error::EmptyInput { op: "softmax" });
            }
        }
        self.push(Tensor::matrix(n, m, data)?, Op::Softmax(a), "softmax")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1 x m`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = dims(tx, "layer_norm")?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [1, m] || tb.shape() != [1, m] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let h = (row[c] - mean) * is;
                xhat[r * m + c] = h;
                out[r * m + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, "layer_norm")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput { op: "concat_cols" })?;
        let n = dims(self.value(*first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims(self.value(p), "concat_cols")?;
            if r != n {
                return Err(mismatch("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor::matrix(n, total, data)?, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = dims(tx, "slice_cols")?;
        if start + len > m {
            return Err(Error::IndexOutOfRange { op: "slice_cols", index: start + len, size: m });
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        self.push(Tensor::matrix(n, len, data)?, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput { op: "concat_rows" })?;
        let m = dims(self.value(*first), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = dims(self.value(p), "concat_rows")?;
            if c != m {
                return Err(mismatch("concat_rows", self.value(*first), self.value(p)));
            }
            n += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::matrix(n, m, data)?, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Gathers the listed rows (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = dims(tx, "select_rows")?;
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange { op: "select_rows", index: i, size: n });
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::matrix(idx.len(), m, data)?;
        self.push(value, Op::SelectRows { x, idx: idx.to_vec() }, "select_rows")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, m) = dims(tl, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch { op: "cross_entropy", lhs: vec![n, m], rhs: vec![targets.len()] });
        }
        if n == 0 {
            return Err(Error::EmptyInput { op: "cross_entropy" });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= m {
                return Err(Error::IndexOutOfRange { op: "cross_entropy", index: t, size: m });
            }
            let row = &tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            tensor::softmax_row(&mut probs[r * m..(r + 1) * m], None);
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, "cross_entropy")
    }

    /// Summed copy loss: for each row `t`, `-ln Σ_{i ∈ targets[t]} softmax(scores_t)_i`.
    pub fn copy_nll(&mut self, scores: Var, targets: &[Vec<usize>]) -> Result<Var> {
        let ts = self.value(scores);
        let (n, m) = dims(ts, "copy_nll")?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch { op: "copy_nll", lhs: vec![n, m], rhs: vec![targets.len()] });
        }
        let mut probs = ts.data().to_vec();
        let mut mass = vec![0.0; n];
        let mut loss = 0.0;
        for (r, set) in targets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::DataIntegrity(format!("copy target at step {r} is absent from the table")));
            }
            if let Some(&bad) = set.iter().find(|&&i| i >= m) {
                return Err(Error::IndexOutOfRange { op: "copy_nll", index: bad, size: m });
            }
            let row = ts.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let tmax = set.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
            let tlse = tmax + set.iter().map(|&i| (row[i] - tmax).exp()).sum::<f64>().ln();
            loss += lse - tlse;
            let p = &mut probs[r * m..(r + 1) * m];
            tensor::softmax_row(p, None);
            mass[r] = set.iter().map(|&i| p[i]).sum();
        }
        let op = Op::CopyNll { scores, targets: targets.to_vec(), probs, mass };
        self.push(Tensor::scalar(loss), op, "copy_nll")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::ShapeMismatch { op: "backward", lhs: lv.shape().to_vec(), rhs: vec![1, 1] });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = out.slot(*id, &node.value);
                    add_into(slot.data_mut(), &g);
                }
                Op::Embedding { table, ids } => {
                    let like = self.params.value(*table);
                    let cols = like.cols();
                    let slot = out.slot(*table, like);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut slot.data_mut()[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k) = (ta.shape()[0], ta.shape()[1]);
                    let m = tb.shape()[1];
                    accumulate(&mut grads, *a, tensor::matmul_nt(&g, tb.data(), n, m, k));
                    accumulate(&mut grads, *b, tensor::matmul_tn(ta.data(), &g, n, k, m));
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k) = (ta.shape()[0], ta.shape()[1]);
                    let m = tb.shape()[0];
                    accumulate(&mut grads, *a, tensor::matmul_nn(&g, tb.data(), n, m, k));
                    accumulate(&mut grads, *b, tensor::matmul_tn(&g, ta.data(), n, m, k));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let m = node.value.cols();
                    let mut gr = vec![0.0; m];
                    for chunk in g.chunks(m) {
                        add_into(&mut gr, chunk);
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.iter().map(|x| x * s).collect());
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let ga = g.iter().zip(ta.data()).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let p = node.value.data();
                    let m = node.value.cols();
                    let mut ga = vec![0.0; p.len()];
                    for r in 0..node.value.rows() {
                        let (pr, gr) = (&p[r * m..(r + 1) * m], &g[r * m..(r + 1) * m]);
                        let s = tensor::dot(pr, gr);
                        for c in 0..m {
                            ga[r * m + c] = pr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (n, m) = (node.value.rows(), node.value.cols());
                    let tg = self.value(*gamma).data();
                    let mut gg = vec![0.0; m];
                    let mut gb = vec![0.0; m];
                    let mut gx = vec![0.0; n * m];
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        let hr = &xhat[r * m..(r + 1) * m];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..m {
                            gg[c] += gr[c] * hr[c];
                            gb[c] += gr[c];
                            let d = gr[c] * tg[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                        }
                        let k = inv_std[r] / m as f64;
                        for c in 0..m {
                            let d = gr[c] * tg[c];
                            gx[r * m + c] = k * (m as f64 * d - sum_d - hr[c] * sum_dh);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::ConcatCols(parts) => {
                    let (n, total) = (node.value.rows(), node.value.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let (n, m) = (tx.rows(), tx.cols());
                    let w = node.value.cols();
                    let mut gx = vec![0.0; n * m];
                    for r in 0..n {
                        gx[r * m + start..r * m + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        accumulate(&mut grads, p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::SelectRows { x, idx } => {
                    let tx = self.value(*x);
                    let m = tx.cols();
                    let mut gx = vec![0.0; tx.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * m..(i + 1) * m], &g[r * m..(r + 1) * m]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let m = self.value(*logits).cols();
                    let n = targets.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * m + t] -= g[0] / n;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::CopyNll { scores, targets, probs, mass } => {
                    let m = self.value(*scores).cols();
                    let mut gs: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    for (r, set) in targets.iter().enumerate() {
                        // Duplicate indices would double count; sets are built deduplicated.
                        for &i in set {
                            gs[r * m + i] -= g[0] * probs[r * m + i] / mass[r];
                        }
                    }
                    accumulate(&mut grads, *scores, gs);
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; len]);
                }
            }
        }
        Ok(out)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, &g),
        slot @ None => *slot = Some(g),
    }
}
