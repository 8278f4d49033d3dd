//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Parameters enter the graph by reference, so frozen weights are never copied
//! and never receive a gradient. Nodes are appended in evaluation order, which
//! makes the node list a valid topological order for the backward sweep.

use std::collections::HashMap;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{dot, norm, Matrix};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, offset: usize, probs: Vec<Matrix> },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    Softmax(Var),
    MaskFill { a: Var, keep: Vec<bool> },
    Log { a: Var, eps: f64 },
    Cosine(Var, Var),
    SumNormalize { a: Var, fallback: bool },
    Pick { a: Var, row: usize, col: usize },
    Gather { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.value(*id),
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, false)
    }

    /// An input whose gradient is wanted after [`Graph::backward`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, true)
    }

    /// A parameter from the store; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let rg = self.store.get(id).trainable;
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: rg });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_rows(self.value(a), self.value(row), |x, y| x + y);
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Multiplies every row of `a` element-wise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_rows(self.value(a), self.value(row), |x, y| x * y);
        let rg = self.rg(&[a, row]);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// Element-wise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(&[a]);
        self.push(out, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise layer normalization with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Multi-head causal attention. Query row `i` sits at absolute position
    /// `offset + i` and attends to key rows `0..=offset + i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, offset: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, n) = qv.shape();
        let tk = kv.rows();
        assert!(offset + tq <= tk, "attention queries run past the key cache");
        assert_eq!(n % heads, 0, "model dim not divisible by heads");
        let dh = n / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(tq, n);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(tq, tk);
            for i in 0..tq {
                let visible = offset + i + 1;
                let qi = &qv.row(i)[cols.clone()];
                let prow = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in prow.iter_mut().enumerate().take(visible) {
                    let s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                    *pj = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for pj in prow.iter_mut().take(visible) {
                    *pj = (*pj - max).exp();
                    total += *pj;
                }
                for pj in prow.iter_mut().take(visible) {
                    *pj /= total;
                }
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (j, &pj) in prow.iter().enumerate().take(visible) {
                    for (o, vj) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += pj * vj;
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.rg(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, offset, probs }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let rg = self.rg(parts);
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows(), "slice_rows out of range");
        let cols = m.cols();
        let out = Matrix::from_vec(len, cols, m.data()[start * cols..(start + len) * cols].to_vec());
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows { a, start }, rg)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    /// Mean over rows, giving a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / m.rows() as f64;
        out.scale_assign(inv);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Replaces every column where `keep` is false by `fill`; those entries get no gradient.
    pub fn mask_fill(&mut self, a: Var, keep: &[bool], fill: f64) -> Var {
        let m = self.value(a);
        assert_eq!(m.cols(), keep.len(), "mask width mismatch");
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (o, &k) in out.row_mut(r).iter_mut().zip(keep) {
                if !k {
                    *o = fill;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::MaskFill { a, keep: keep.to_vec() }, rg)
    }

    /// `ln(a + eps)`.
    pub fn log(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|x| (x + eps).ln());
        let rg = self.rg(&[a]);
        self.push(out, Op::Log { a, eps }, rg)
    }

    /// Pairwise cosine similarities between the rows of `a` (r x n) and `b` (s x n).
    /// Pairs involving a zero-norm row evaluate to 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols(), bm.cols(), "cosine width mismatch");
        let mut out = Matrix::zeros(am.rows(), bm.rows());
        for i in 0..am.rows() {
            let na = norm(am.row(i));
            for j in 0..bm.rows() {
                let nb = norm(bm.row(j));
                if na > 0.0 && nb > 0.0 {
                    out.set(i, j, dot(am.row(i), bm.row(j)) / (na * nb));
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Cosine(a, b), rg)
    }

    /// Divides a `1 x k` row by its sum. When `|sum| < eps` the result is the
    /// uniform row `1/k` and carries no gradient.
    pub fn sum_normalize(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let k = m.len();
        let total: f64 = m.data().iter().sum();
        let (out, fallback) = if total.abs() < eps {
            (Matrix::filled(m.rows(), m.cols(), 1.0 / k as f64), true)
        } else {
            (m.map(|x| x / total), false)
        };
        let rg = self.rg(&[a]) && !fallback;
        self.push(out, Op::SumNormalize { a, fallback }, rg)
    }

    /// The single entry `a[row, col]` as a `1 x 1` value.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let v = self.value(a).get(row, col);
        let rg = self.rg(&[a]);
        self.push(Matrix::from_vec(1, 1, vec![v]), Op::Pick { a, row, col }, rg)
    }

    /// Rows `ids` of `table`, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        self.push(Matrix::from_vec(ids.len(), cols, data), Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Reverse sweep from the given output seeds.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn send(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = node.value.as_ref().expect("computed node has a value");
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.send(grads, *a, g.matmul_bt(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.send(grads, *b, self.value(*a).matmul_at(g));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.send(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    self.send(grads, *row, column_sums(g));
                }
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.send(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.send(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.send(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulRow(a, row) => {
                if self.requires_grad(*a) {
                    self.send(grads, *a, broadcast_rows(g, self.value(*row), |x, y| x * y));
                }
                if self.requires_grad(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.send(grads, *row, column_sums(&prod));
                }
            }
            Op::MulConst(a, c) => self.send(grads, *a, g.zip_map(c, |x, y| x * y)),
            Op::Scale(a, s) => self.send(grads, *a, g.map(|x| x * s)),
            Op::AddConst(a) => self.send(grads, *a, g.clone()),
            Op::Tanh(a) => self.send(grads, *a, g.zip_map(out, |x, t| x * (1.0 - t * t))),
            Op::Gelu(a) => {
                let d = self.value(*a).map(|x| {
                    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
                });
                self.send(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Relu(a) => {
                let d = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.send(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                let (rows, cols) = xhat.shape();
                if self.requires_grad(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let xh = xhat.row(r);
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dot(&dxhat, xh) / cols as f64;
                        for ((o, d), xv) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                            *o = inv_std[r] * (d - m1 - xv * m2);
                        }
                    }
                    self.send(grads, *x, dx);
                }
                if self.requires_grad(*gain) {
                    self.send(grads, *gain, column_sums(&g.zip_map(xhat, |a, b| a * b)));
                }
                if self.requires_grad(*bias) {
                    self.send(grads, *bias, column_sums(g));
                }
            }
            Op::Attention { q, k, v, heads, offset, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, n) = qv.shape();
                let tk = kv.rows();
                let dh = n / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(tq, n);
                let mut dk = Matrix::zeros(tk, n);
                let mut dv = Matrix::zeros(tk, n);
                for (h, p) in probs.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..tq {
                        let visible = offset + i + 1;
                        let gi = &g.row(i)[cols.clone()];
                        let prow = p.row(i);
                        let mut dp = vec![0.0; visible];
                        for j in 0..visible {
                            dp[j] = dot(gi, &vv.row(j)[cols.clone()]);
                            let pij = prow[j];
                            for (d, gg) in dv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                                *d += pij * gg;
                            }
                        }
                        let inner: f64 = (0..visible).map(|j| prow[j] * dp[j]).sum();
                        let qi: Vec<f64> = qv.row(i)[cols.clone()].to_vec();
                        let dqi = &mut dq.row_mut(i)[cols.clone()];
                        for j in 0..visible {
                            let ds = prow[j] * (dp[j] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for (d, kk) in dqi.iter_mut().zip(&kv.row(j)[cols.clone()]) {
                                *d += ds * kk;
                            }
                            for (d, qq) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                                *d += ds * qq;
                            }
                        }
                    }
                }
                self.send(grads, *q, dq);
                self.send(grads, *k, dk);
                self.send(grads, *v, dv);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.requires_grad(p) {
                        let d = g.data()[start * cols..(start + rows) * cols].to_vec();
                        self.send(grads, p, Matrix::from_vec(rows, cols, d));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { a, start } => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                let cols = src.cols();
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.send(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let inv = 1.0 / src.rows() as f64;
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    for (o, gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv * inv;
                    }
                }
                self.send(grads, *a, d);
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                self.send(grads, *a, Matrix::filled(src.rows(), src.cols(), g.scalar()));
            }
            Op::Softmax(a) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(p, gr);
                    for ((o, pv), gv) in d.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *o = pv * (gv - inner);
                    }
                }
                self.send(grads, *a, d);
            }
            Op::MaskFill { a, keep } => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    for (o, &k) in d.row_mut(r).iter_mut().zip(keep) {
                        if !k {
                            *o = 0.0;
                        }
                    }
                }
                self.send(grads, *a, d);
            }
            Op::Log { a, eps } => {
                let d = g.zip_map(self.value(*a), |gv, x| gv / (x + eps));
                self.send(grads, *a, d);
            }
            Op::Cosine(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let na: Vec<f64> = (0..am.rows()).map(|i| norm(am.row(i))).collect();
                let nb: Vec<f64> = (0..bm.rows()).map(|j| norm(bm.row(j))).collect();
                let mut da = Matrix::zeros(am.rows(), am.cols());
                let mut db = Matrix::zeros(bm.rows(), bm.cols());
                for i in 0..am.rows() {
                    for j in 0..bm.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 || na[i] == 0.0 || nb[j] == 0.0 {
                            continue;
                        }
                        let c = out.get(i, j);
                        let inv = 1.0 / (na[i] * nb[j]);
                        let (ai, bj) = (am.row(i), bm.row(j));
                        let ca = c / (na[i] * na[i]);
                        for ((d, bv), av) in da.row_mut(i).iter_mut().zip(bj).zip(ai) {
                            *d += gij * (bv * inv - ca * av);
                        }
                        let cb = c / (nb[j] * nb[j]);
                        for ((d, av), bv) in db.row_mut(j).iter_mut().zip(ai).zip(bj) {
                            *d += gij * (av * inv - cb * bv);
                        }
                    }
                }
                self.send(grads, *a, da);
                self.send(grads, *b, db);
            }
            Op::SumNormalize { a, fallback } => {
                if !fallback {
                    let src = self.value(*a);
                    let total: f64 = src.data().iter().sum();
                    let inner = dot(g.data(), src.data()) / (total * total);
                    let d = g.map(|gv| gv / total - inner);
                    self.send(grads, *a, d);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (o, gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                self.send(grads, *table, d);
            }
            Op::Pick { a, row, col } => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                d.set(*row, *col, g.scalar());
                self.send(grads, *a, d);
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a node, if one reached it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients collected from the graph's parameter nodes.
    pub fn param_grads(&self, graph: &Graph<'_>) -> ParamGrads {
        let mut out = ParamGrads::new(graph.store.len());
        for (&id, &v) in &graph.param_nodes {
            if let Some(g) = &self.grads[v.0] {
                out.accumulate(id, g);
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn broadcast_rows(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.rows(), 1, "broadcast operand must be a row");
    assert_eq!(a.cols(), row.cols(), "broadcast width mismatch");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, v) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o = f(*o, *v);
        }
    }
    out
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
