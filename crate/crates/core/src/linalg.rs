//! Dense real matrix/vector arithmetic for the capsule math.
//!
//! Row-major `f64` storage, no external linear-algebra backend. The two
//! non-trivial routines operate on the small c×c Gram matrix of a subspace
//! basis: [`sym_inverse`] (Cholesky) and [`sym_inv_sqrt`] (cyclic Jacobi
//! eigendecomposition). Everything is deterministic: identical inputs give
//! bit-identical outputs within one build.

use thiserror::Error;

/// Relative Frobenius tolerance used to accept a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("{op}: incompatible dimensions {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric within {SYMMETRY_TOL:e} relative tolerance")]
    NotSymmetric,
    #[error("singular or not positive definite: {detail}")]
    Singular { detail: String },
    #[error("{op} produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("data length {got} does not match {rows}x{cols}")]
    InvalidData {
        rows: usize,
        cols: usize,
        got: usize,
    },
}

/// Dense matrix, row-major: entry (i, j) lives at `data[i * cols + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::InvalidData {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from row slices; panics on ragged input (programmer error).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "at least one row required");
        let cols = rows[0].len();
        assert!(cols >= 1, "at least one column required");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), cols, "row {i} has inconsistent length");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                lhs: (self.rows, self.cols),
                rhs: (other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j order keeps both inner accesses row-contiguous.
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        if !out.is_finite() {
            return Err(LinalgError::NonFinite { op: "matmul" });
        }
        Ok(out)
    }

    /// `self * v`.
    pub fn matvec(&self, v: &Vector) -> Result<Vector, LinalgError> {
        if self.cols != v.dim() {
            return Err(LinalgError::ShapeMismatch {
                op: "matvec",
                lhs: (self.rows, self.cols),
                rhs: (v.dim(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot_slices(self.row(i), v.as_slice());
        }
        let out = Vector::from_vec(out);
        if !out.is_finite() {
            return Err(LinalgError::NonFinite { op: "matvec" });
        }
        Ok(out)
    }

    /// `self^T * v` without materializing the transpose.
    pub fn tmatvec(&self, v: &Vector) -> Result<Vector, LinalgError> {
        if self.rows != v.dim() {
            return Err(LinalgError::ShapeMismatch {
                op: "tmatvec",
                lhs: (self.cols, self.rows),
                rhs: (v.dim(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let x = v.as_slice()[i];
            if x == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * x;
            }
        }
        let out = Vector::from_vec(out);
        if !out.is_finite() {
            return Err(LinalgError::NonFinite { op: "tmatvec" });
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self += scale * other`, in place.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<(), LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                op: "add_scaled",
                lhs: (self.rows, self.cols),
                rhs: (other.rows, other.cols),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                op,
                lhs: (self.rows, self.cols),
                rhs: (other.rows, other.cols),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Panics on empty input (dim >= 1 is a type invariant).
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector dimension must be >= 1");
        Self { data }
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Self::from_vec(data.to_vec())
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "vector dimension must be >= 1");
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64, LinalgError> {
        if self.dim() != other.dim() {
            return Err(LinalgError::ShapeMismatch {
                op: "dot",
                lhs: (self.dim(), 1),
                rhs: (other.dim(), 1),
            });
        }
        Ok(dot_slices(&self.data, &other.data))
    }

    /// Euclidean norm; 0 for the zero vector.
    pub fn norm2(&self) -> f64 {
        dot_slices(&self.data, &self.data).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Result<Vector, LinalgError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector, LinalgError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self += scale * other`, in place.
    pub fn add_scaled(&mut self, other: &Vector, scale: f64) -> Result<(), LinalgError> {
        if self.dim() != other.dim() {
            return Err(LinalgError::ShapeMismatch {
                op: "add_scaled",
                lhs: (self.dim(), 1),
                rhs: (other.dim(), 1),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(
        &self,
        other: &Vector,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vector, LinalgError> {
        if self.dim() != other.dim() {
            return Err(LinalgError::ShapeMismatch {
                op,
                lhs: (self.dim(), 1),
                rhs: (other.dim(), 1),
            });
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

#[inline]
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Rank-1 outer product `u * v^T`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    let mut out = Matrix::zeros(u.dim(), v.dim());
    for i in 0..u.dim() {
        let ui = u.get(i);
        let row = &mut out.data[i * v.dim()..(i + 1) * v.dim()];
        for (o, &vj) in row.iter_mut().zip(v.as_slice()) {
            *o = ui * vj;
        }
    }
    out
}

fn check_symmetric(g: &Matrix) -> Result<(), LinalgError> {
    if g.rows != g.cols {
        return Err(LinalgError::NotSquare {
            rows: g.rows,
            cols: g.cols,
        });
    }
    let mut asym = 0.0;
    for i in 0..g.rows {
        for j in (i + 1)..g.cols {
            let d = g.get(i, j) - g.get(j, i);
            asym += 2.0 * d * d;
        }
    }
    let scale = g.frobenius_norm().max(1.0);
    if asym.sqrt() > SYMMETRY_TOL * scale {
        return Err(LinalgError::NotSymmetric);
    }
    Ok(())
}

/// Lower Cholesky factor of an SPD matrix. Fails on a non-positive or
/// non-finite pivot.
fn cholesky(a: &Matrix) -> Result<Matrix, LinalgError> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s.is_finite() && s > 0.0) {
                    return Err(LinalgError::Singular {
                        detail: format!("Cholesky pivot {s:e} at index {i}"),
                    });
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Inverse of the symmetric positive definite matrix `g + eps * I`,
/// via Cholesky factorization. The result is explicitly symmetrized.
pub fn sym_inverse(g: &Matrix, eps: f64) -> Result<Matrix, LinalgError> {
    check_symmetric(g)?;
    let n = g.rows;
    let mut shifted = g.clone();
    if eps != 0.0 {
        for i in 0..n {
            let v = shifted.get(i, i);
            shifted.set(i, i, v + eps);
        }
    }
    let l = cholesky(&shifted)?;
    // Solve L L^T X = I column by column.
    let mut inv = Matrix::zeros(n, n);
    let mut y = vec![0.0; n];
    for col in 0..n {
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l.get(i, k) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l.get(k, i) * inv.get(k, col);
            }
            inv.set(i, col, s / l.get(i, i));
        }
    }
    // Suppress asymmetry from roundoff.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (inv.get(i, j) + inv.get(j, i));
            inv.set(i, j, m);
            inv.set(j, i, m);
        }
    }
    if !inv.is_finite() {
        return Err(LinalgError::NonFinite { op: "sym_inverse" });
    }
    Ok(inv)
}

/// Inverse square root of `g + eps * I` via a symmetric eigendecomposition
/// (cyclic Jacobi). Errors if any shifted eigenvalue is non-positive.
pub fn sym_inv_sqrt(g: &Matrix, eps: f64) -> Result<Matrix, LinalgError> {
    check_symmetric(g)?;
    let (values, vectors) = jacobi_eigen(g)?;
    let n = g.rows;
    let mut out = Matrix::zeros(n, n);
    let mut scaled = vec![0.0; n];
    for (k, &lambda) in values.iter().enumerate() {
        let shifted = lambda + eps;
        if !(shifted.is_finite() && shifted > 0.0) {
            return Err(LinalgError::Singular {
                detail: format!("eigenvalue {shifted:e} after eps shift"),
            });
        }
        scaled[k] = 1.0 / shifted.sqrt();
    }
    // V diag(1/sqrt(lambda)) V^T
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..n {
                s += vectors.get(i, k) * scaled[k] * vectors.get(j, k);
            }
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    if !out.is_finite() {
        return Err(LinalgError::NonFinite { op: "sym_inv_sqrt" });
    }
    Ok(out)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, matrix whose columns are the eigenvectors).
fn jacobi_eigen(g: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    let n = g.rows;
    let mut a = g.clone();
    let mut v = Matrix::identity(n);
    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * m.get(i, j) * m.get(i, j);
            }
        }
        s.sqrt()
    };
    let tol = 1e-14 * a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        if off(&a) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !a.is_finite() || !v.is_finite() {
        return Err(LinalgError::NonFinite { op: "jacobi_eigen" });
    }
    let values = (0..n).map(|i| a.get(i, i)).collect();
    Ok((values, v))
}
