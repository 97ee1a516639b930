//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in execution order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the tape in
//! reverse from a scalar root and returns the adjoint of every node.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, NORM_FLOOR};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Relu(Var),
    /// Saves the pre-normalization row norms; degenerate rows carry zero.
    L2Normalize(Var, Vec<S>),
    ConcatCols(Var, Var),
    SelectRows(Var, Vec<usize>),
    RowSqNorm(Var),
    RowNorm(Var),
    MulCol(Var, Var),
    PlmLambda {
        input: Var,
        alpha: S,
        gamma: S,
        threshold: S,
    },
    Mean(Var),
    Sum(Var),
    /// Saves the softmax probabilities.
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Linear record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    degenerate_rows: usize,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    adjoints: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Adjoint of `v`, or `None` if `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, materialized as zeros when `v` does not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), degenerate_rows: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of rows that `l2_normalize` left untouched because their norm
    /// was below the floor.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<S> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a value with no gradient path (a constant).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `x + b` with the `1 x m` bias broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim("add_bias", format!("bias {:?} for input {:?}", bv.shape(), xv.shape())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// `x · W + b`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let value = self.value(x).scale(k);
        self.push(value, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        self.push(value, Op::Relu(x))
    }

    /// Row-wise L2 normalization. Rows with norm below the floor pass
    /// through unchanged and are counted in [`Tape::degenerate_rows`].
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let (value, degenerate) = input.l2_normalize_rows();
        let floor = S::of(NORM_FLOOR);
        let norms: Vec<S> = input
            .row_sq_norms()
            .into_iter()
            .map(|s| {
                let n = s.sqrt();
                if n < floor {
                    S::zero()
                } else {
                    n
                }
            })
            .collect();
        self.degenerate_rows += degenerate.len();
        self.push(value, Op::L2Normalize(x, norms))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Gathers rows by index; repeated indices accumulate in the backward pass.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(indices)?;
        Ok(self.push(value, Op::SelectRows(x, indices.to_vec())))
    }

    /// Squared Euclidean norm of each row, as an `n x 1` column.
    pub fn row_sq_norm(&mut self, x: Var) -> Var {
        let sq = self.value(x).row_sq_norms();
        let value = Tensor::new(sq.len(), 1, sq).expect("column shape");
        self.push(value, Op::RowSqNorm(x))
    }

    /// Euclidean norm of each row, as an `n x 1` column. The gradient at a
    /// zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let n: Vec<S> = self.value(x).row_sq_norms().into_iter().map(|s| s.sqrt()).collect();
        let value = Tensor::new(n.len(), 1, n).expect("column shape");
        self.push(value, Op::RowNorm(x))
    }

    /// Scales row `i` of `x` by `s[i]`, where `s` is an `n x 1` column.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(Error::dim("mul_col", format!("scale {:?} for input {:?}", sv.shape(), xv.shape())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let k = sv.data()[r];
            for v in out.row_mut(r) {
                *v = *v * k;
            }
        }
        Ok(self.push(out, Op::MulCol(x, s)))
    }

    /// Piecewise stretch factor applied elementwise to a column of pair
    /// distances; see [`crate::plm::lambda`].
    pub fn plm_lambda(&mut self, distances: Var, alpha: S, gamma: S, threshold: S) -> Var {
        let value = self.value(distances).map(|d| crate::plm::lambda(d, alpha, gamma, threshold));
        self.push(value, Op::PlmLambda { input: distances, alpha, gamma, threshold })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / S::count(v.len().max(1));
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        if labels.len() != n {
            return Err(Error::dim("softmax_ce", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::contract(format!("label {l} at row {i} out of range for {c} classes")));
        }
        let (probs, log_probs) = softmax_rows(lv);
        let total: S = labels.iter().enumerate().map(|(r, &l)| -log_probs.get(r, l)).sum();
        let loss = total / S::count(n.max(1));
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    /// Computes `∂root/∂node` for every node on the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(Error::contract(format!("backward root must be scalar, got {:?}", root_value.shape())));
        }
        let mut adj: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    add_to(&mut adj, *a, ga)?;
                    add_to(&mut adj, *b, gb)?;
                }
                Op::AddBias(x, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    add_to(&mut adj, *bias, gb)?;
                    add_to(&mut adj, *x, g.clone())?;
                }
                Op::Add(a, b) => {
                    add_to(&mut adj, *a, g.clone())?;
                    add_to(&mut adj, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    add_to(&mut adj, *b, g.scale(-S::one()))?;
                    add_to(&mut adj, *a, g.clone())?;
                }
                Op::Scale(x, k) => add_to(&mut adj, *x, g.scale(*k))?,
                Op::AddScalar(x) => add_to(&mut adj, *x, g.clone())?,
                Op::Relu(x) => {
                    let mask = self.value(*x);
                    let gx = g.zip_map(mask, "relu'", |gv, xv| if xv > S::zero() { gv } else { S::zero() })?;
                    add_to(&mut adj, *x, gx)?;
                }
                Op::L2Normalize(x, norms) => {
                    // y = x/‖x‖  ⇒  ∂x = (g − y·(g·y)) / ‖x‖
                    let y = &node.value;
                    let mut gx = g.clone();
                    for r in 0..y.rows() {
                        let norm = norms[r];
                        if norm == S::zero() {
                            continue;
                        }
                        let yr = y.row(r);
                        let dot: S = g.row(r).iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (o, &yv) in gx.row_mut(r).iter_mut().zip(yr) {
                            *o = (*o - yv * dot) / norm;
                        }
                    }
                    add_to(&mut adj, *x, gx)?;
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut ga = Tensor::zeros(g.rows(), ca);
                    let mut gb = Tensor::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    add_to(&mut adj, *a, ga)?;
                    add_to(&mut adj, *b, gb)?;
                }
                Op::SelectRows(x, indices) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Tensor::zeros(rows, cols);
                    for (r, &src) in indices.iter().enumerate() {
                        for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    add_to(&mut adj, *x, gx)?;
                }
                Op::RowSqNorm(x) => {
                    let xv = self.value(*x);
                    let mut gx = xv.clone();
                    let two = S::of(2.0);
                    for r in 0..gx.rows() {
                        let k = two * g.data()[r];
                        for v in gx.row_mut(r) {
                            *v = *v * k;
                        }
                    }
                    add_to(&mut adj, *x, gx)?;
                }
                Op::RowNorm(x) => {
                    let xv = self.value(*x);
                    let mut gx = xv.clone();
                    for r in 0..gx.rows() {
                        let n = node.value.data()[r];
                        let k = if n > S::zero() { g.data()[r] / n } else { S::zero() };
                        for v in gx.row_mut(r) {
                            *v = *v * k;
                        }
                    }
                    add_to(&mut adj, *x, gx)?;
                }
                Op::MulCol(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let mut gx = g.clone();
                    let mut gs = Tensor::zeros(sv.rows(), 1);
                    for r in 0..g.rows() {
                        let k = sv.data()[r];
                        let dot: S = g.row(r).iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum();
                        gs.data_mut()[r] = dot;
                        for v in gx.row_mut(r) {
                            *v = *v * k;
                        }
                    }
                    add_to(&mut adj, *x, gx)?;
                    add_to(&mut adj, *s, gs)?;
                }
                Op::PlmLambda { input, alpha, gamma, threshold } => {
                    let dv = self.value(*input);
                    let gd = g.zip_map(dv, "plm_lambda'", |gv, d| {
                        gv * crate::plm::lambda_derivative(d, *alpha, *gamma, *threshold)
                    })?;
                    add_to(&mut adj, *input, gd)?;
                }
                Op::Mean(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    let k = g.data()[0] / S::count((rows * cols).max(1));
                    add_to(&mut adj, *x, Tensor::filled(rows, cols, k))?;
                }
                Op::Sum(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    add_to(&mut adj, *x, Tensor::filled(rows, cols, g.data()[0]))?;
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let k = g.data()[0] / S::count(labels.len().max(1));
                    let mut gl = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        let v = gl.get(r, l);
                        gl.set(r, l, v - S::one());
                    }
                    add_to(&mut adj, *logits, gl.scale(k))?;
                }
            }
            // Keep the adjoint of leaves and the root for the caller.
            if matches!(node.op, Op::Leaf) || idx == root.0 {
                adj[idx] = Some(g);
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn add_to<S: Scalar>(adj: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.accumulate(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Row-wise softmax and log-softmax.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let (n, c) = logits.shape();
    let mut probs = Tensor::zeros(n, c);
    let mut log_probs = Tensor::zeros(n, c);
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
        for j in 0..c {
            let lp = row[j] - lse;
            log_probs.set(r, j, lp);
            probs.set(r, j, lp.exp());
        }
    }
    (probs, log_probs)
}
