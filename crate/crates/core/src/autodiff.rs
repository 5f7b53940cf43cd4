//! Reverse-mode differentiation over matrix-valued primitives.
//!
//! Models and losses are written once against the [`Graph`] trait. The
//! [`Eager`] graph evaluates them directly; the [`Tape`] records every
//! primitive with the forward values its backward rule needs, then
//! [`Tape::backward`] walks the record in reverse. Both graphs call the
//! same kernels, so a taped loss equals its eager evaluation exactly.
//!
//! [`grad_check`] compares tape gradients against central finite
//! differences of the eager evaluation.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, ZERO_NORM_TOL};

/// Elementwise nonlinearity of a dense stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
        }
    }
}

/// Probability clamp of the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;

/// Primitive operations shared by the eager evaluator and the tape.
pub trait Graph {
    type Value: Clone;

    /// Inserts a non-differentiable input.
    fn constant(&mut self, m: Matrix) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Matrix;

    fn transpose(&mut self, a: &Self::Value) -> Self::Value;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `a * b^T`
    fn matmul_nt(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `a^T * b`
    fn matmul_tn(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `alpha * a + beta`, elementwise.
    fn affine(&mut self, a: &Self::Value, alpha: f64, beta: f64) -> Self::Value;
    /// Adds a `1 x n` row to every row of `a`.
    fn add_row(&mut self, a: &Self::Value, row: &Self::Value) -> Result<Self::Value>;
    fn activate(&mut self, a: &Self::Value, act: Activation) -> Self::Value;
    /// Thin QR with nonnegative `diag(r)`; returns `(q, r)`.
    fn qr(&mut self, a: &Self::Value) -> Result<(Self::Value, Self::Value)>;
    /// Cosine of matching rows, as a column (`B x 1`).
    fn row_cosine(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn select_rows(&mut self, a: &Self::Value, rows: &[usize]) -> Result<Self::Value>;
    /// Mean of all entries (`1 x 1`).
    fn mean(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Sum of squares of all entries (`1 x 1`).
    fn frobenius_sq(&mut self, a: &Self::Value) -> Self::Value;
    /// Mean binary cross-entropy of `sigmoid(scores)` against 0/1 targets.
    fn bce_with_logits(&mut self, scores: &Self::Value, targets: &[f64]) -> Result<Self::Value>;

    fn scale(&mut self, a: &Self::Value, c: f64) -> Self::Value {
        self.affine(a, c, 0.0)
    }

    fn scalar(&mut self, x: f64) -> Self::Value {
        self.constant(Matrix::scalar(x))
    }
}

// ---------------------------------------------------------------------------
// Forward kernels (shared)
// ---------------------------------------------------------------------------

mod kernel {
    use super::*;

    pub fn affine(a: &Matrix, alpha: f64, beta: f64) -> Matrix {
        a.map(|x| alpha * x + beta)
    }

    pub fn add_row(a: &Matrix, row: &Matrix) -> Result<Matrix> {
        if row.rows() != 1 || row.cols() != a.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", a.shape(), row.shape()),
            ));
        }
        let mut out = a.clone();
        let c = a.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += row.data()[i % c];
        }
        Ok(out)
    }

    pub fn row_cosine(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "row_cosine",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = Vec::with_capacity(a.rows());
        for i in 0..a.rows() {
            out.push(linalg::cosine(a.row(i), b.row(i))?);
        }
        Ok(Matrix::from_raw(a.rows(), 1, out))
    }

    pub fn mean(a: &Matrix) -> Result<Matrix> {
        let n = a.data().len();
        if n == 0 {
            return Err(Error::EmptyBatch("mean"));
        }
        Ok(Matrix::scalar(a.data().iter().sum::<f64>() / n as f64))
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + libm::exp(-x))
        } else {
            let e = libm::exp(x);
            e / (1.0 + e)
        }
    }

    pub fn bce(scores: &Matrix, targets: &[f64]) -> Result<Matrix> {
        if scores.cols() != 1 || scores.rows() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("scores {:?}, {} targets", scores.shape(), targets.len()),
            ));
        }
        if targets.is_empty() {
            return Err(Error::EmptyBatch("bce_with_logits"));
        }
        let mut s = 0.0;
        for (&z, &y) in scores.data().iter().zip(targets) {
            let p = sigmoid(z).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            s -= y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p);
        }
        Ok(Matrix::scalar(s / targets.len() as f64))
    }
}

// ---------------------------------------------------------------------------
// Eager evaluation
// ---------------------------------------------------------------------------

/// Direct evaluation: values are plain matrices, nothing is recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Value = Matrix;

    fn constant(&mut self, m: Matrix) -> Matrix {
        m
    }
    fn value<'a>(&'a self, v: &'a Matrix) -> &'a Matrix {
        v
    }
    fn transpose(&mut self, a: &Matrix) -> Matrix {
        a.transpose()
    }
    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        linalg::matmul(a, b)
    }
    fn matmul_nt(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        linalg::matmul_nt(a, b)
    }
    fn matmul_tn(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        linalg::matmul_tn(a, b)
    }
    fn add(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        linalg::add(a, b)
    }
    fn sub(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        linalg::sub(a, b)
    }
    fn affine(&mut self, a: &Matrix, alpha: f64, beta: f64) -> Matrix {
        kernel::affine(a, alpha, beta)
    }
    fn add_row(&mut self, a: &Matrix, row: &Matrix) -> Result<Matrix> {
        kernel::add_row(a, row)
    }
    fn activate(&mut self, a: &Matrix, act: Activation) -> Matrix {
        a.map(|x| act.apply(x))
    }
    fn qr(&mut self, a: &Matrix) -> Result<(Matrix, Matrix)> {
        let f = linalg::qr_thin(a)?;
        Ok((f.q, f.r))
    }
    fn row_cosine(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        kernel::row_cosine(a, b)
    }
    fn select_rows(&mut self, a: &Matrix, rows: &[usize]) -> Result<Matrix> {
        a.select_rows(rows)
    }
    fn mean(&mut self, a: &Matrix) -> Result<Matrix> {
        kernel::mean(a)
    }
    fn frobenius_sq(&mut self, a: &Matrix) -> Matrix {
        Matrix::scalar(linalg::frobenius_sq(a))
    }
    fn bce_with_logits(&mut self, scores: &Matrix, targets: &[f64]) -> Result<Matrix> {
        kernel::bce(scores, targets)
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Transpose(usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    MatMulTn(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Affine(usize, f64),
    AddRow(usize, usize),
    Activate(usize, Activation),
    /// Q factor; saves R.
    QrQ(usize, Matrix),
    /// R factor; saves Q.
    QrR(usize, Matrix),
    RowCosine(usize, usize),
    SelectRows(usize, Vec<usize>),
    Mean(usize),
    FrobeniusSq(usize),
    Bce(usize, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Transpose(..) => "transpose",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::MatMulTn(..) => "matmul_tn",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Affine(..) => "affine",
            Op::AddRow(..) => "add_row",
            Op::Activate(..) => "activate",
            Op::QrQ(..) => "qr.q",
            Op::QrR(..) => "qr.r",
            Op::RowCosine(..) => "row_cosine",
            Op::SelectRows(..) => "select_rows",
            Op::Mean(..) => "mean",
            Op::FrobeniusSq(..) => "frobenius_sq",
            Op::Bce(..) => "bce_with_logits",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Constant | Op::Param => [None, None],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::MatMulTn(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::RowCosine(a, b) => [Some(a), Some(b)],
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Activate(a, _)
            | Op::QrQ(a, _)
            | Op::QrR(a, _)
            | Op::SelectRows(a, _)
            | Op::Mean(a)
            | Op::FrobeniusSq(a)
            | Op::Bce(a, _) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    /// True when some parameter reaches this node.
    live: bool,
}

/// Gradients of a scalar loss, one matrix per registered parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    grads: Vec<Matrix>,
}

impl GradientSet {
    pub fn new(grads: Vec<Matrix>) -> Self {
        GradientSet { grads }
    }
    pub fn get(&self, param: usize) -> &Matrix {
        &self.grads[param]
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
    pub fn into_inner(self) -> Vec<Matrix> {
        self.grads
    }
}

/// Recording of one forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
    #[cfg(test)]
    pub(crate) corrupt_activation_rule: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers a differentiable parameter; ids are assigned in call order.
    pub fn param(&mut self, m: Matrix) -> Var {
        let v = self.push(m, Op::Param, true);
        self.params.push(v.0);
        v
    }

    pub fn params(&mut self, ms: &[Matrix]) -> Vec<Var> {
        ms.iter().map(|m| self.param(m.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, live: bool) -> Var {
        self.nodes.push(Node { value, op, live });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op) -> Var {
        let live = op.inputs().iter().flatten().any(|&i| self.nodes[i].live);
        self.push(value, op, live)
    }

    /// Propagates adjoints from the scalar `root` back to every parameter.
    ///
    /// Parameters that do not reach `root` get zero gradients.
    pub fn backward(&self, root: Var) -> Result<GradientSet> {
        let n = self.nodes.len();
        if root.0 >= n {
            return Err(Error::Tape(format!(
                "root {} outside tape of {} nodes",
                root.0, n
            )));
        }
        if self.nodes[root.0].value.shape() != (1, 1) {
            return Err(Error::Tape(format!(
                "root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; n];
        adj[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.live {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Param = node.op {
                adj[idx] = Some(g);
                continue;
            }
            for (input, grad) in self.local_backward(idx, &g)? {
                if input >= idx {
                    return Err(Error::Tape(format!(
                        "node {} ({}) reads later node {}",
                        idx,
                        node.op.name(),
                        input
                    )));
                }
                if !self.nodes[input].live {
                    continue;
                }
                match &mut adj[input] {
                    Some(acc) => {
                        *acc = linalg::add(acc, &grad)?;
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|&p| {
                let shape = self.nodes[p].value.shape();
                adj[p]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
            })
            .collect::<Vec<_>>();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(GradientSet { grads })
    }

    fn local_backward(&self, idx: usize, g: &Matrix) -> Result<Vec<(usize, Matrix)>> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let out = match &node.op {
            Op::Constant | Op::Param => Vec::new(),
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::MatMul(a, b) => vec![
                (*a, linalg::matmul_nt(g, val(*b))?),
                (*b, linalg::matmul_tn(val(*a), g)?),
            ],
            Op::MatMulNt(a, b) => vec![
                (*a, linalg::matmul(g, val(*b))?),
                (*b, linalg::matmul_tn(g, val(*a))?),
            ],
            Op::MatMulTn(a, b) => vec![
                (*a, linalg::matmul_nt(val(*b), g)?),
                (*b, linalg::matmul(val(*a), g)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Affine(a, alpha) => vec![(*a, g.scale(*alpha))],
            Op::AddRow(a, row) => {
                let cols = g.cols();
                let mut sums = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (s, x) in sums.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                vec![(*a, g.clone()), (*row, Matrix::from_raw(1, cols, sums))]
            }
            Op::Activate(a, act) => {
                let y = &node.value;
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(y.data().iter().zip(x.data()))
                    .map(|(&gi, (&yi, &xi))| {
                        let d = match act {
                            Activation::Tanh => 1.0 - yi * yi,
                            Activation::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Identity => 1.0,
                        };
                        gi * d
                    })
                    .collect();
                #[allow(unused_mut)]
                let mut grad = Matrix::from_raw(g.rows(), g.cols(), data);
                #[cfg(test)]
                if self.corrupt_activation_rule {
                    grad = grad.scale(1.5);
                }
                vec![(*a, grad)]
            }
            Op::QrQ(a, r) => vec![(*a, qr_backward(&node.value, r, Some(g), None)?)],
            Op::QrR(a, q) => vec![(*a, qr_backward(q, &node.value, None, Some(g))?)],
            Op::RowCosine(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                let cols = am.cols();
                let mut ga = vec![0.0; am.data().len()];
                let mut gb = vec![0.0; bm.data().len()];
                for i in 0..am.rows() {
                    let (u, v) = (am.row(i), bm.row(i));
                    let (nu, nv) = (linalg::norm(u), linalg::norm(v));
                    if nu < ZERO_NORM_TOL || nv < ZERO_NORM_TOL {
                        continue;
                    }
                    let c = node.value.get(i, 0);
                    let gi = g.get(i, 0);
                    let inv = 1.0 / (nu * nv);
                    for j in 0..cols {
                        ga[i * cols + j] = gi * (v[j] * inv - c * u[j] / (nu * nu));
                        gb[i * cols + j] = gi * (u[j] * inv - c * v[j] / (nv * nv));
                    }
                }
                vec![
                    (*a, Matrix::from_raw(am.rows(), cols, ga)),
                    (*b, Matrix::from_raw(bm.rows(), cols, gb)),
                ]
            }
            Op::SelectRows(a, rows) => {
                let src = val(*a);
                let cols = src.cols();
                let mut out = Matrix::zeros(src.rows(), cols);
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
                    for (d, x) in dst.iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                vec![(*a, out)]
            }
            Op::Mean(a) => {
                let src = val(*a);
                let n = src.data().len() as f64;
                let gi = g.data()[0] / n;
                vec![(
                    *a,
                    Matrix::from_raw(src.rows(), src.cols(), vec![gi; src.data().len()]),
                )]
            }
            Op::FrobeniusSq(a) => vec![(*a, val(*a).scale(2.0 * g.data()[0]))],
            Op::Bce(a, targets) => {
                let s = val(*a);
                let n = targets.len() as f64;
                let gi = g.data()[0];
                let data = s
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| {
                        let p = kernel::sigmoid(z);
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            0.0
                        } else {
                            gi * (p - y) / n
                        }
                    })
                    .collect();
                vec![(*a, Matrix::from_raw(s.rows(), 1, data))]
            }
        };
        Ok(out)
    }
}

/// Adjoint of the thin QR factorization `A = Q R` (R invertible):
///
/// `M = R Rbar^T - Qbar^T Q`, `Abar = (Qbar + Q copyltu(M)) R^{-T}`,
/// where `copyltu` mirrors the lower triangle of `M` onto the upper one.
pub fn qr_backward(
    q: &Matrix,
    r: &Matrix,
    q_bar: Option<&Matrix>,
    r_bar: Option<&Matrix>,
) -> Result<Matrix> {
    let (d, k) = q.shape();
    let mut m = Matrix::zeros(k, k);
    if let Some(rb) = r_bar {
        m = linalg::matmul_nt(r, rb)?;
    }
    if let Some(qb) = q_bar {
        m = linalg::sub(&m, &linalg::matmul_tn(qb, q)?)?;
    }
    let mut sym = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let v = if i >= j { m.get(i, j) } else { m.get(j, i) };
            sym.data_mut()[i * k + j] = v;
        }
    }
    let mut lhs = linalg::matmul(q, &sym)?;
    if let Some(qb) = q_bar {
        lhs = linalg::add(&lhs, qb)?;
    }
    debug_assert_eq!(lhs.shape(), (d, k));
    linalg::solve_right_upper_transpose(&lhs, r)
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Matrix {
        &self.nodes[v.0].value
    }
    fn transpose(&mut self, a: &Var) -> Var {
        let m = self.get(*a).transpose();
        self.push_op(m, Op::Transpose(a.0))
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = linalg::matmul(self.get(*a), self.get(*b))?;
        Ok(self.push_op(m, Op::MatMul(a.0, b.0)))
    }
    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = linalg::matmul_nt(self.get(*a), self.get(*b))?;
        Ok(self.push_op(m, Op::MatMulNt(a.0, b.0)))
    }
    fn matmul_tn(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = linalg::matmul_tn(self.get(*a), self.get(*b))?;
        Ok(self.push_op(m, Op::MatMulTn(a.0, b.0)))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = linalg::add(self.get(*a), self.get(*b))?;
        Ok(self.push_op(m, Op::Add(a.0, b.0)))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = linalg::sub(self.get(*a), self.get(*b))?;
        Ok(self.push_op(m, Op::Sub(a.0, b.0)))
    }
    fn affine(&mut self, a: &Var, alpha: f64, beta: f64) -> Var {
        let m = kernel::affine(self.get(*a), alpha, beta);
        self.push_op(m, Op::Affine(a.0, alpha))
    }
    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let m = kernel::add_row(self.get(*a), self.get(*row))?;
        Ok(self.push_op(m, Op::AddRow(a.0, row.0)))
    }
    fn activate(&mut self, a: &Var, act: Activation) -> Var {
        let m = self.get(*a).map(|x| act.apply(x));
        self.push_op(m, Op::Activate(a.0, act))
    }
    fn qr(&mut self, a: &Var) -> Result<(Var, Var)> {
        let f = linalg::qr_thin(self.get(*a))?;
        let q = self.push_op(f.q.clone(), Op::QrQ(a.0, f.r.clone()));
        let r = self.push_op(f.r, Op::QrR(a.0, f.q));
        Ok((q, r))
    }
    fn row_cosine(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = kernel::row_cosine(self.get(*a), self.get(*b))?;
        Ok(self.push_op(m, Op::RowCosine(a.0, b.0)))
    }
    fn select_rows(&mut self, a: &Var, rows: &[usize]) -> Result<Var> {
        let m = self.get(*a).select_rows(rows)?;
        Ok(self.push_op(m, Op::SelectRows(a.0, rows.to_vec())))
    }
    fn mean(&mut self, a: &Var) -> Result<Var> {
        let m = kernel::mean(self.get(*a))?;
        Ok(self.push_op(m, Op::Mean(a.0)))
    }
    fn frobenius_sq(&mut self, a: &Var) -> Var {
        let m = Matrix::scalar(linalg::frobenius_sq(self.get(*a)));
        self.push_op(m, Op::FrobeniusSq(a.0))
    }
    fn bce_with_logits(&mut self, scores: &Var, targets: &[f64]) -> Result<Var> {
        let m = kernel::bce(self.get(*scores), targets)?;
        Ok(self.push_op(m, Op::Bce(scores.0, targets.to_vec())))
    }
}

// ---------------------------------------------------------------------------
// Programs, recording and gradient checking
// ---------------------------------------------------------------------------

/// A scalar-valued computation over a list of parameters.
///
/// Inputs (batches, masks, constants) are carried by the implementor.
pub trait Program {
    fn eval<G: Graph>(&self, graph: &mut G, params: &[G::Value]) -> Result<G::Value>;
}

fn scalar_of(m: &Matrix, what: &'static str) -> Result<f64> {
    m.as_scalar()
        .ok_or_else(|| Error::shape(what, format!("expected scalar, got {:?}", m.shape())))
}

/// Evaluates a program without recording.
pub fn eval_eager<P: Program>(program: &P, params: &[Matrix]) -> Result<f64> {
    let mut g = Eager;
    let out = program.eval(&mut g, params)?;
    scalar_of(&out, "eval_eager")
}

/// Runs `program` on a fresh tape; returns the loss, the tape and its root.
pub fn forward_record<P: Program>(program: &P, params: &[Matrix]) -> Result<(f64, Tape, Var)> {
    record_on(Tape::new(), program, params)
}

fn record_on<P: Program>(
    mut tape: Tape,
    program: &P,
    params: &[Matrix],
) -> Result<(f64, Tape, Var)> {
    let vars = tape.params(params);
    let root = program.eval(&mut tape, &vars)?;
    let loss = scalar_of(tape.get(root), "forward_record")?;
    Ok((loss, tape, root))
}

/// Loss and gradients in one call.
pub fn value_and_grad<P: Program>(program: &P, params: &[Matrix]) -> Result<(f64, GradientSet)> {
    let (loss, tape, root) = forward_record(program, params)?;
    Ok((loss, tape.backward(root)?))
}

/// Finite-difference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            rel_tol: 1e-4,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst_param: Option<(usize, usize)>,
    pub entries_checked: usize,
    /// Set when a perturbed loss was not finite.
    pub non_finite_at: Option<(usize, usize)>,
    pub pass: bool,
}

/// Denominator floor of the relative error.
const REL_ERR_FLOOR: f64 = 1e-8;

/// Compares tape gradients of `program` with central differences
/// `(L(p + h) - L(p - h)) / 2h`, entry by entry.
pub fn grad_check<P: Program>(
    program: &P,
    params: &[Matrix],
    opts: GradCheckOptions,
) -> Result<CheckReport> {
    grad_check_on(Tape::new(), program, params, opts)
}

fn grad_check_on<P: Program>(
    tape: Tape,
    program: &P,
    params: &[Matrix],
    opts: GradCheckOptions,
) -> Result<CheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument(
            "grad_check step must be positive".to_string(),
        ));
    }
    let (_, tape, root) = record_on(tape, program, params)?;
    let analytic = tape.backward(root)?;
    compare_with_numeric(program, params, &analytic, opts)
}

/// Checks an arbitrary gradient set against finite differences.
pub fn compare_with_numeric<P: Program>(
    program: &P,
    params: &[Matrix],
    analytic: &GradientSet,
    opts: GradCheckOptions,
) -> Result<CheckReport> {
    let h = opts.step;
    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        entries_checked: 0,
        non_finite_at: None,
        pass: true,
    };
    for p in 0..params.len() {
        for e in 0..params[p].data().len() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + h;
            let plus = eval_eager(program, &work);
            work[p].data_mut()[e] = orig - h;
            let minus = eval_eager(program, &work);
            work[p].data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
                (Err(err), _) | (_, Err(err)) if !err.is_numerical() => return Err(err),
                _ => {
                    report.non_finite_at = Some((p, e));
                    report.pass = false;
                    report.max_rel_error = f64::INFINITY;
                    report.worst_param = Some((p, e));
                    return Ok(report);
                }
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(p).data()[e];
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(REL_ERR_FLOOR);
            let rel = libm::fabs(a - numeric) / denom;
            report.entries_checked += 1;
            if report.worst_param.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some((p, e));
            }
        }
    }
    report.pass = report.max_rel_error <= opts.rel_tol;
    Ok(report)
}
