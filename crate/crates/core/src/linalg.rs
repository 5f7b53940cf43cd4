//! Dense row-major matrices and the handful of kernels the projection
//! layers are built from: products, thin Householder QR, complement
//! projection, cosine similarity and Frobenius norms.
//!
//! Every kernel here is a pure function of its inputs. The autodiff tape
//! and the eager evaluator both call into this module, which is what makes
//! taped and eager losses agree bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine`].
pub const ZERO_NORM_TOL: f64 = 1e-12;

/// Relative factor of the QR rank test, scaled by `max(d, k)` and the
/// largest column norm of the input.
pub const RANK_TOL_FACTOR: f64 = 1e-10;

/// Dense real matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, rejecting length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {}x{} matrix", data.len(), rows, cols),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("ragged rows: {} vs {}", r.len(), cols),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// A single column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Matrix::new(values.len(), 1, values.to_vec())
    }

    /// A 1x1 matrix.
    pub fn scalar(x: f64) -> Self {
        Matrix::from_raw(1, 1, vec![x])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Overwrites one entry; non-finite values are rejected.
    pub fn set(&mut self, r: usize, c: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite("Matrix::set"));
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// The single value of a 1x1 matrix.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    /// Copies out the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::shape(
                    "select_rows",
                    format!("row {} out of range for {} rows", i, self.rows),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix::from_raw(indices.len(), self.cols, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| c * x)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_same("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Matrix::from_raw(a.rows, a.cols, data))
}

pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_same("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Matrix::from_raw(a.rows, a.cols, data))
}

/// `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in orow.iter_mut().zip(b.row(p)) {
                *o += aip * bpj;
            }
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// `a * b^T`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}^T", a.shape(), b.shape()),
        ));
    }
    let (n, m) = (a.rows, b.rows);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out.push(dot(ar, b.row(j)));
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// `a^T * b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}^T x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..a.rows {
        let br = b.row(p);
        for (i, &api) in a.row(p).iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            for (o, &bpj) in out[i * m..(i + 1) * m].iter_mut().zip(br) {
                *o += api * bpj;
            }
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// Inner product, accumulated in four interleaved lanes.
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len().min(v.len());
    let (u, v) = (&u[..n], &v[..n]);
    let mut acc = [0.0f64; 4];
    let mut cu = u.chunks_exact(4);
    let mut cv = v.chunks_exact(4);
    for (a, b) in (&mut cu).zip(&mut cv) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let tail: f64 = cu
        .remainder()
        .iter()
        .zip(cv.remainder())
        .map(|(a, b)| a * b)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(u: &[f64]) -> f64 {
    libm::sqrt(dot(u, u))
}

/// Cosine similarity; 0 when either vector has norm below [`ZERO_NORM_TOL`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "cosine",
            format!("lengths {} and {}", u.len(), v.len()),
        ));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < ZERO_NORM_TOL || nv < ZERO_NORM_TOL {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum()
}

/// Thin QR factors with a nonnegative diagonal on `r`.
#[derive(Clone, Debug)]
pub struct ThinQr {
    pub q: Matrix,
    pub r: Matrix,
}

/// Thin Householder QR of a tall `d x k` matrix (`d >= k >= 1`).
///
/// Column signs are flipped so that `diag(r) >= 0`, which makes the
/// factorization unique for full-rank input. A diagonal entry at or below
/// `1e-10 * max(d, k) * max_j ||m[:, j]||` is reported as rank deficiency.
pub fn qr_thin(m: &Matrix) -> Result<ThinQr> {
    let (d, k) = m.shape();
    if k == 0 || d < k {
        return Err(Error::shape(
            "qr_thin",
            format!("need d >= k >= 1, got {}x{}", d, k),
        ));
    }
    let max_col = (0..k).map(|j| norm(&m.col(j))).fold(0.0, f64::max);
    let tol = RANK_TOL_FACTOR * (d.max(k) as f64) * max_col;

    let mut a = m.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let x: Vec<f64> = (j..d).map(|i| a.get(i, j)).collect();
        let xnorm = norm(&x);
        let mut v = x;
        if xnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -xnorm } else { xnorm };
        v[0] -= alpha;
        let vnorm = norm(&v);
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        for x in v.iter_mut() {
            *x /= vnorm;
        }
        // A[j.., j..] -= 2 v (v^T A[j.., j..])
        for c in j..k {
            let s: f64 = (j..d).map(|i| v[i - j] * a.get(i, c)).sum();
            for i in j..d {
                let idx = i * k + c;
                a.data[idx] -= 2.0 * v[i - j] * s;
            }
        }
        reflectors.push(v);
    }

    let mut r = Matrix::zeros(k, k);
    for i in 0..k {
        for c in i..k {
            r.data[i * k + c] = a.get(i, c);
        }
    }

    // Q = H_0 H_1 ... H_{k-1} [I_k; 0]
    let mut q = Matrix::zeros(d, k);
    for i in 0..k {
        q.data[i * k + i] = 1.0;
    }
    for j in (0..k).rev() {
        let v = &reflectors[j];
        if v.is_empty() {
            continue;
        }
        for c in 0..k {
            let s: f64 = (j..d).map(|i| v[i - j] * q.get(i, c)).sum();
            if s == 0.0 {
                continue;
            }
            for i in j..d {
                q.data[i * k + c] -= 2.0 * v[i - j] * s;
            }
        }
    }

    for j in 0..k {
        if r.get(j, j) < 0.0 {
            for c in j..k {
                r.data[j * k + c] = -r.data[j * k + c];
            }
            for i in 0..d {
                q.data[i * k + j] = -q.data[i * k + j];
            }
        }
        let rjj = r.get(j, j);
        if rjj <= tol {
            return Err(Error::RankDeficient {
                column: j,
                magnitude: rjj,
                tolerance: tol,
            });
        }
    }
    Ok(ThinQr { q, r })
}

/// `f - q (q^T f)` for a single vector, without forming the projector.
pub fn project_out(q: &Matrix, f: &[f64]) -> Result<Vec<f64>> {
    if q.rows != f.len() {
        return Err(Error::shape(
            "project_out",
            format!("basis {:?} vs vector of length {}", q.shape(), f.len()),
        ));
    }
    let k = q.cols;
    let mut coeff = vec![0.0; k];
    for (i, &fi) in f.iter().enumerate() {
        for (c, &qic) in coeff.iter_mut().zip(q.row(i)) {
            *c += qic * fi;
        }
    }
    Ok(f.iter()
        .enumerate()
        .map(|(i, &fi)| fi - dot(q.row(i), &coeff))
        .collect())
}

/// Row-wise complement projection of a batch: returns `(F_proj, F_removed)`
/// with `F_removed = (F q) q^T` and `F_proj = F - F_removed`.
pub fn project_rows(q: &Matrix, f: &Matrix) -> Result<(Matrix, Matrix)> {
    let coords = matmul(f, q)?;
    let removed = matmul_nt(&coords, q)?;
    let kept = sub(f, &removed)?;
    Ok((kept, removed))
}

/// `I_d - q q^T`. Diagnostic only; the layers use the factored form.
pub fn projector_complement(q: &Matrix) -> Matrix {
    let d = q.rows;
    let mut p = Matrix::identity(d);
    if q.cols == 0 {
        return p;
    }
    for i in 0..d {
        for j in 0..d {
            p.data[i * d + j] -= dot(q.row(i), q.row(j));
        }
    }
    p
}

/// Solves `x r^T = b` for `x`, with `r` upper-triangular and invertible.
pub fn solve_right_upper_transpose(b: &Matrix, r: &Matrix) -> Result<Matrix> {
    let k = r.rows;
    if r.cols != k || b.cols != k {
        return Err(Error::shape(
            "solve_right_upper_transpose",
            format!("b {:?}, r {:?}", b.shape(), r.shape()),
        ));
    }
    // Row i of x satisfies r x_i^T = b_i^T: back substitution.
    let mut out = vec![0.0; b.rows * k];
    for i in 0..b.rows {
        let bi = b.row(i);
        let xi = &mut out[i * k..(i + 1) * k];
        for a in (0..k).rev() {
            let mut s = bi[a];
            for (rc, xc) in r.row(a)[a + 1..].iter().zip(&xi[a + 1..]) {
                s -= rc * xc;
            }
            xi[a] = s / r.get(a, a);
        }
    }
    Ok(Matrix::from_raw(b.rows, k, out))
}

/// `||m^T m - I||_F`, the orthonormality defect of a basis.
pub fn orthonormality_defect(m: &Matrix) -> f64 {
    let gram = matmul_tn(m, m).expect("square gram");
    let k = m.cols;
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            let e = gram.get(i, j) - if i == j { 1.0 } else { 0.0 };
            s += e * e;
        }
    }
    libm::sqrt(s)
}
