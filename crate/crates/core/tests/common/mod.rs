//! Independent oracles shared by the integration tests. Everything here
//! deliberately avoids the library's own factorizations: matrix products are
//! naive triple loops and inverses come from Gauss-Jordan elimination with
//! partial pivoting, so the production paths are checked against a different
//! route.

#![allow(dead_code)]

use caproj::linalg::{Matrix, Vector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Naive triple-loop matrix product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Gauss-Jordan inverse with partial pivoting. Panics on singular input;
/// only used on well-conditioned test matrices.
pub fn gauss_jordan_inverse(a: &Matrix) -> Matrix {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let mut aug = Matrix::zeros(n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            aug.set(i, j, a.get(i, j));
        }
        aug.set(i, n + i, 1.0);
    }
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if aug.get(row, col).abs() > aug.get(pivot, col).abs() {
                pivot = row;
            }
        }
        assert!(aug.get(pivot, col).abs() > 1e-300, "singular test matrix");
        if pivot != col {
            for j in 0..2 * n {
                let tmp = aug.get(col, j);
                aug.set(col, j, aug.get(pivot, j));
                aug.set(pivot, j, tmp);
            }
        }
        let p = aug.get(col, col);
        for j in 0..2 * n {
            aug.set(col, j, aug.get(col, j) / p);
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = aug.get(row, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                let v = aug.get(row, j) - f * aug.get(col, j);
                aug.set(row, j, v);
            }
        }
    }
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            inv.set(i, j, aug.get(i, n + j));
        }
    }
    inv
}

/// Explicit projection matrix `P = W (W^T W)^-1 W^T` by the Gauss-Jordan
/// route. The production code never materializes this.
pub fn explicit_projection(w: &Matrix) -> Matrix {
    let wt = w.transpose();
    let gram = naive_matmul(&wt, w);
    let inv = gauss_jordan_inverse(&gram);
    naive_matmul(&naive_matmul(w, &inv), &wt)
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_vector<R: Rng>(dim: usize, rng: &mut R) -> Vector {
    Vector::from_vec((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &cols {
            let proj: f64 = v.iter().zip(b).map(|(&x, &y)| x * y).sum();
            for (vi, &bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    let mut m = Matrix::zeros(n, n);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

/// Random invertible matrix with condition number at most 4:
/// Q1 diag(u) Q2 with u uniform in [0.5, 2].
pub fn random_well_conditioned<R: Rng>(n: usize, rng: &mut R) -> Matrix {
    let q1 = random_orthogonal(n, rng);
    let q2 = random_orthogonal(n, rng);
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        d.set(i, i, rng.random_range(0.5..2.0));
    }
    naive_matmul(&naive_matmul(&q1, &d), &q2)
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let mut m = 0.0f64;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            m = m.max((a.get(i, j) - b.get(i, j)).abs());
        }
    }
    m
}

pub fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm()
}
