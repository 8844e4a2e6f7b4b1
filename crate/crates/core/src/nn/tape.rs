//! Reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Tape`] records every primitive op in topological order as the
//! forward pass runs; [`Tape::backward`] then walks the record once in
//! reverse, producing exact gradients for every parameter leaf. Graphs
//! are built per forward pass and thrown away, so a model forward is a
//! plain function from `(&ParameterStore, inputs)` to tensor ids.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::params::{Gradients, ParameterStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant or parameter leaf.
    Leaf,
    /// (m×k)·(k×n)
    MatMul(TensorId, TensorId),
    /// Elementwise sum, same shape.
    Add(TensorId, TensorId),
    /// (m×n) + row (1×n), broadcast over rows.
    AddRow(TensorId, TensorId),
    /// (m×n) * row (1×n), broadcast over rows.
    MulRow(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    /// Smooth activation (tanh-approximated), kink-free so central
    /// differences stay valid at every point.
    Gelu(TensorId),
    /// Row-wise stable softmax.
    Softmax(TensorId),
    /// Row-wise log-softmax.
    LogSoftmax(TensorId),
    /// Row-wise (x−μ)/√(σ²+ε), ε=1e-5, no affine.
    LayerNorm(TensorId),
    Transpose(TensorId),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    /// Half-open row range.
    SliceRows(TensorId, usize),
    /// Half-open column range.
    SliceCols(TensorId, usize),
    /// Gather rows of a table by index; one output row per id.
    Embed(TensorId, Vec<usize>),
    /// (1×n) mean over m rows.
    MeanRows(TensorId),
    /// (m×n) → (⌈m/2⌉×2n): consecutive row pairs concatenated,
    /// zero-padded when m is odd. Stride-2 temporal downsampling.
    PairRows(TensorId),
    /// Single element as a 1×1 scalar.
    Pick(TensorId, usize, usize),
    /// Elementwise log(exp(a)+exp(b)), same shape.
    LogAddExp(TensorId, TensorId),
    /// 1×1 sum of all entries.
    SumAll(TensorId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: (usize, usize),
    value: Vec<f64>,
    requires_grad: bool,
    /// Set for parameter leaves; routes gradients back to the store.
    param_name: Option<String>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

/// The computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: BTreeMap<String, TensorId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, t: TensorId) -> (usize, usize) {
        self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, t: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[t.0].shape, (1, 1));
        self.nodes[t.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: (usize, usize), value: Vec<f64>, rg: bool) -> TensorId {
        debug_assert_eq!(value.len(), shape.0 * shape.1);
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad: rg,
            param_name: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    // ---- leaves ------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> TensorId {
        assert_eq!(data.len(), rows * cols, "constant: data/shape mismatch");
        self.push(Op::Leaf, (rows, cols), data, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(Op::Leaf, (1, 1), vec![v], false)
    }

    /// Fetch a parameter from the store as a differentiable leaf.
    /// Repeated fetches of the same name return the same node, so
    /// shared tables (e.g. a tied embedding) accumulate gradient from
    /// every use site.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> TensorId {
        if let Some(&id) = self.param_cache.get(name) {
            return id;
        }
        let p = store.get(name);
        let id = self.push(Op::Leaf, p.shape, p.value.clone(), true);
        self.nodes[id.0].param_name = Some(name.to_string());
        self.param_cache.insert(name.to_string(), id);
        id
    }

    // ---- primitives --------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        // ikj order: stream through contiguous rows of b.
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), (m, n), out, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "add: shape mismatch");
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), sa, v, rg)
    }

    /// `a` (m×n) plus row vector `row` (1×n), broadcast over rows.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: want 1×{n}");
        let rv = self.nodes[row.0].value.clone();
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(row);
        self.push(Op::AddRow(a, row), (m, n), v, rg)
    }

    /// `a` (m×n) times row vector `row` (1×n), broadcast over rows.
    pub fn mul_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row: want 1×{n}");
        let rv = self.nodes[row.0].value.clone();
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x * rv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(row);
        self.push(Op::MulRow(a, row), (m, n), v, rg)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let s = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), s, v, rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(Op::Relu(a), s, v, rg)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| gelu_fwd(x)).collect();
        let rg = self.rg(a);
        self.push(Op::Gelu(a), s, v, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a.0].value[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                v[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                v[i * n + j] /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(Op::Softmax(a), (m, n), v, rg)
    }

    /// Row-wise log-softmax: x − max − log Σ exp(x − max). Never −∞ for
    /// finite inputs (the max term contributes 1 to the sum).
    pub fn log_softmax(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a.0].value[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..n {
                v[i * n + j] = row[j] - lse;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), (m, n), v, rg)
    }

    /// Row-wise layer normalization without affine terms. A constant
    /// row maps to zeros (ε keeps the denominator positive).
    pub fn layer_norm(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a.0].value[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                v[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LayerNorm(a), (m, n), v, rg)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = self.nodes[a.0].value[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), (n, m), v, rg)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let n = self.shape(parts[0]).1;
        let mut v = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, n, "concat_rows: column mismatch");
            v.extend_from_slice(&self.nodes[p.0].value);
            rows += r;
            rg |= self.rg(p);
        }
        self.push(Op::ConcatRows(parts.to_vec()), (rows, n), v, rg)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: empty");
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = vec![0.0; m * total];
        let mut off = 0;
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, m, "concat_cols: row mismatch");
            for i in 0..m {
                v[i * total + off..i * total + off + c]
                    .copy_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
            off += c;
            rg |= self.rg(p);
        }
        self.push(Op::ConcatCols(parts.to_vec()), (m, total), v, rg)
    }

    pub fn slice_rows(&mut self, a: TensorId, from: usize, to: usize) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(from <= to && to <= m, "slice_rows: [{from},{to}) of {m}");
        let v = self.nodes[a.0].value[from * n..to * n].to_vec();
        let rg = self.rg(a);
        self.push(Op::SliceRows(a, from), (to - from, n), v, rg)
    }

    pub fn slice_cols(&mut self, a: TensorId, from: usize, to: usize) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(from <= to && to <= n, "slice_cols: [{from},{to}) of {n}");
        let mut v = vec![0.0; m * (to - from)];
        for i in 0..m {
            v[i * (to - from)..(i + 1) * (to - from)]
                .copy_from_slice(&self.nodes[a.0].value[i * n + from..i * n + to]);
        }
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, from), (m, to - from), v, rg)
    }

    /// Gather `ids` rows of `table` (one output row per id).
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let (rows, dim) = self.shape(table);
        let mut v = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            assert!(id < rows, "embed: id {id} out of range {rows}");
            v.extend_from_slice(&self.nodes[table.0].value[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(table);
        self.push(Op::Embed(table, ids.to_vec()), (ids.len(), dim), v, rg)
    }

    pub fn mean_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(m > 0, "mean_rows: empty");
        let mut v = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                v[j] += self.nodes[a.0].value[i * n + j];
            }
        }
        for x in &mut v {
            *x /= m as f64;
        }
        let rg = self.rg(a);
        self.push(Op::MeanRows(a), (1, n), v, rg)
    }

    /// Concatenate consecutive row pairs: (m×n) → (⌈m/2⌉×2n), the odd
    /// trailing row padded with zeros.
    pub fn pair_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(m > 0, "pair_rows: empty");
        let out_rows = m.div_ceil(2);
        let mut v = vec![0.0; out_rows * 2 * n];
        for i in 0..m {
            let (r, half) = (i / 2, i % 2);
            v[r * 2 * n + half * n..r * 2 * n + (half + 1) * n]
                .copy_from_slice(&self.nodes[a.0].value[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        self.push(Op::PairRows(a), (out_rows, 2 * n), v, rg)
    }

    /// Element (i, j) as a 1×1 scalar node.
    pub fn pick(&mut self, a: TensorId, i: usize, j: usize) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(i < m && j < n, "pick: ({i},{j}) out of {m}×{n}");
        let v = vec![self.nodes[a.0].value[i * n + j]];
        let rg = self.rg(a);
        self.push(Op::Pick(a, i, j), (1, 1), v, rg)
    }

    /// Elementwise stable log(exp(a)+exp(b)).
    pub fn logaddexp(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "logaddexp: shape mismatch");
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| {
                let m = x.max(y);
                if m == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    m + ((x - m).exp() + (y - m).exp()).ln()
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::LogAddExp(a, b), s, v, rg)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let v = vec![self.nodes[a.0].value.iter().sum()];
        let rg = self.rg(a);
        self.push(Op::SumAll(a), (1, 1), v, rg)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a recorded scalar. Returns per-parameter
    /// gradients keyed by name; accumulation into a store (or across a
    /// batch) is the caller's reduction.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Argument("backward: unrecorded value".into()));
        }
        if self.nodes[loss.0].shape != (1, 1) {
            return Err(Error::Argument(format!(
                "backward: loss must be scalar, got {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            // Re-stash for parameter leaves so they can be collected.
            if self.nodes[idx].param_name.is_some() {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param_name, &grads[idx]) {
                out.insert(name.clone(), g.clone());
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], t: TensorId, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        let slot = grads[t.0].get_or_insert_with(|| vec![0.0; self.nodes[t.0].value.len()]);
        contrib(slot);
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (m, n) = node.shape;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                // dA = g·Bᵀ: row-dot form so both operands stream contiguously.
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, slot) in darow.iter_mut().enumerate() {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            *slot += s;
                        }
                    }
                });
                // dB = Aᵀ·g
                self.acc(grads, *b, |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                self.acc(grads, *b, |db| {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                self.acc(grads, *row, |dr| {
                    for (i, &gi) in g.iter().enumerate() {
                        dr[i % n] += gi;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let av = &self.nodes[a.0].value;
                let rv = &self.nodes[row.0].value;
                self.acc(grads, *a, |da| {
                    for (i, &gi) in g.iter().enumerate() {
                        da[i] += gi * rv[i % n];
                    }
                });
                self.acc(grads, *row, |dr| {
                    for (i, &gi) in g.iter().enumerate() {
                        dr[i % n] += gi * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                self.acc(grads, *a, |da| {
                    for (i, &gi) in g.iter().enumerate() {
                        if av[i] > 0.0 {
                            da[i] += gi;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                self.acc(grads, *a, |da| {
                    for (i, &gi) in g.iter().enumerate() {
                        da[i] += gi * gelu_bwd(av[i]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(yj, gj)| yj * gj).sum();
                        for j in 0..n {
                            da[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            da[i * n + j] += gr[j] - y[i * n + j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm(a) => {
                let av = &self.nodes[a.0].value;
                let y = &node.value;
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        let xr = &av[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var = xr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let gmean = gr.iter().sum::<f64>() / n as f64;
                        let gydot = gr.iter().zip(yr).map(|(gj, yj)| gj * yj).sum::<f64>() / n as f64;
                        for j in 0..n {
                            da[i * n + j] += inv * (gr[j] - gmean - yr[j] * gydot);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                // node is n_a×m_a transposed: node shape (m,n) = (cols_a, rows_a)
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    self.acc(grads, p, |dp| {
                        for (d, &gi) in dp.iter_mut().zip(&g[off * c..(off + r) * c]) {
                            *d += gi;
                        }
                    });
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    self.acc(grads, p, |dp| {
                        for i in 0..r {
                            for j in 0..c {
                                dp[i * c + j] += g[i * n + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows(a, from) => {
                let (_, ac) = self.shape(*a);
                let from = *from;
                self.acc(grads, *a, |da| {
                    for (i, &gi) in g.iter().enumerate() {
                        da[from * ac + i] += gi;
                    }
                });
            }
            Op::SliceCols(a, from) => {
                let (_, ac) = self.shape(*a);
                let from = *from;
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * ac + from + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Embed(table, ids) => {
                let (_, dim) = self.shape(*table);
                self.acc(grads, *table, |dt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            dt[id * dim + j] += g[row * dim + j];
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (am, _) = self.shape(*a);
                let w = 1.0 / am as f64;
                self.acc(grads, *a, |da| {
                    for i in 0..am {
                        for j in 0..n {
                            da[i * n + j] += g[j] * w;
                        }
                    }
                });
            }
            Op::PairRows(a) => {
                let (am, an) = self.shape(*a);
                self.acc(grads, *a, |da| {
                    for i in 0..am {
                        let (r, half) = (i / 2, i % 2);
                        for j in 0..an {
                            da[i * an + j] += g[r * n + half * an + j];
                        }
                    }
                });
            }
            Op::Pick(a, i, j) => {
                let (_, ac) = self.shape(*a);
                let (i, j) = (*i, *j);
                self.acc(grads, *a, |da| {
                    da[i * ac + j] += g[0];
                });
            }
            Op::LogAddExp(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let y = &node.value;
                self.acc(grads, *a, |da| {
                    for i in 0..g.len() {
                        if y[i] != f64::NEG_INFINITY {
                            da[i] += g[i] * (av[i] - y[i]).exp();
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..g.len() {
                        if y[i] != f64::NEG_INFINITY {
                            db[i] += g[i] * (bv[i] - y[i]).exp();
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                self.acc(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                });
            }
        }
    }
}
