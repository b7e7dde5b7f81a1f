//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Parameters
//! live in a [`ParamStore`] and enter the tape through [`Tape::param`];
//! [`Tape::backward`] then returns one gradient per registered parameter,
//! shaped like that parameter.

use serde::{Deserialize, Serialize};

use super::matrix::{log_softmax_rows, matmul, matmul_nt, matmul_tn, softmax_rows, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Matrix,
}

/// Named registry of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(NamedParam {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NamedParam)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            grads: self
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }
}

/// One gradient matrix per parameter of a [`ParamStore`], same order and shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grads {
    grads: Vec<Matrix>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.grads.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// Adds a `1 × c` row to every row.
    AddRow(Var, Var),
    /// Multiplies every row elementwise by a `1 × c` row.
    MulRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Row normalisation to zero mean, unit variance; stores `1/σ` per row.
    LayerNorm(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    /// Picks one column per row, producing an `n × 1` column.
    Gather(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Operation recorder for reverse-mode differentiation.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (ma, mr) = (self.value(a), self.value(row));
        if mr.rows() != 1 || mr.cols() != ma.cols() {
            return Err(Error::shape(op, ma.shape(), mr.shape()));
        }
        Ok(())
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..v.rows() {
            for (x, g) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= g;
            }
        }
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    /// `a + c` for a constant matrix `c`.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let v = self.value(a).add(c)?;
        Ok(self.push(v, Op::AddConst(a)))
    }

    /// `a ⊙ c` for a constant matrix `c`.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let v = self.value(a).zip_map(&c, "mul_const", |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardisation without the affine part.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c) = x.shape();
        let mut out = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hstack(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::Index(format!("row {bad} out of range for {} rows", m.rows())));
        }
        let v = m.select_rows(indices);
        Ok(self.push(v, Op::SelectRows(a, indices.to_vec())))
    }

    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if cols.len() != m.rows() {
            return Err(Error::shape("gather", m.shape(), (cols.len(), 1)));
        }
        let mut v = Matrix::zeros(m.rows(), 1);
        for (r, &c) in cols.iter().enumerate() {
            if c >= m.cols() {
                return Err(Error::Index(format!("column {c} out of range for {} columns", m.cols())));
            }
            v.set(r, 0, m.get(r, c));
        }
        Ok(self.push(v, Op::Gather(a, cols.to_vec())))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum. On ties the gradient goes to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "min", |x, y| if y < x { y } else { x })?;
        Ok(self.push(v, Op::Min(a, b)))
    }

    /// Mean of all entries as a `1 × 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::filled(1, 1, m.sum() / m.data().len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Affine map `x · w + b` with `b` a `1 × cols` row.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Propagates adjoints from the scalar `loss` back to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let out = &self.nodes[loss.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::shape("backward", out.shape(), (1, 1)));
        }
        let mut adj: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut grads = self.store.zeros_like();

        fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut adj[v.0] {
                Some(existing) => existing.axpy(1.0, &g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.get_mut(*id).axpy(1.0, &g),
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&g, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &g)?;
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    // c = a bᵀ: da = g b, db = gᵀ a
                    let da = matmul(&g, self.value(*b))?;
                    let db = matmul_tn(&g, self.value(*a))?;
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.scale(-1.0));
                    acc(&mut adj, *a, g);
                }
                Op::Hadamard(a, b) => {
                    let da = g.zip_map(self.value(*b), "hadamard", |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), "hadamard", |x, y| x * y)?;
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(&mut adj, *row, dr);
                    acc(&mut adj, *a, g);
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let rv = self.value(*row).data();
                    let mut dr = Matrix::zeros(1, g.cols());
                    let mut da = g.clone();
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            dr.data_mut()[c] += g.get(r, c) * av.get(r, c);
                        }
                        for (d, s) in da.row_mut(r).iter_mut().zip(rv) {
                            *d *= s;
                        }
                    }
                    acc(&mut adj, *row, dr);
                    acc(&mut adj, *a, da);
                }
                Op::AddConst(a) => acc(&mut adj, *a, g),
                Op::MulConst(a, c) => {
                    let da = g.zip_map(c, "mul_const", |x, y| x * y)?;
                    acc(&mut adj, *a, da);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), "relu", |x, v| if v > 0.0 { x } else { 0.0 })?;
                    acc(&mut adj, *a, da);
                }
                Op::Exp(a) => {
                    let da = g.zip_map(&node.value, "exp", |x, y| x * y)?;
                    acc(&mut adj, *a, da);
                }
                Op::Square(a) => {
                    let da = g.zip_map(self.value(*a), "square", |x, v| 2.0 * x * v)?;
                    acc(&mut adj, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, p)| x * p).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for c in 0..y.cols() {
                            da.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::LayerNorm(a, inv_std) => {
                    let xhat = &node.value;
                    let c = xhat.cols() as f64;
                    let mut da = Matrix::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.iter().sum::<f64>() / c;
                        let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c;
                        for (j, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = inv_std[r] * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let dp = g.slice_cols(offset, w)?;
                        offset += w;
                        acc(&mut adj, *p, dp);
                    }
                }
                Op::SelectRows(a, idx) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, x) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::Gather(a, cols) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        da.set(r, c, g.get(r, 0));
                    }
                    acc(&mut adj, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let da = g.zip_map(self.value(*a), "clamp", |x, v| {
                        if v < *lo || v > *hi {
                            0.0
                        } else {
                            x
                        }
                    })?;
                    acc(&mut adj, *a, da);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = g.clone();
                    let mut db = g;
                    for k in 0..da.data().len() {
                        if vb.data()[k] < va.data()[k] {
                            da.data_mut()[k] = 0.0;
                        } else {
                            db.data_mut()[k] = 0.0;
                        }
                    }
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let n = src.data().len() as f64;
                    acc(&mut adj, *a, Matrix::filled(src.rows(), src.cols(), g.data()[0] / n));
                }
            }
        }
        Ok(grads)
    }
}
