//! One class's capsule subspace.
//!
//! A subspace is spanned by the columns of a d×c basis matrix `W`. Scoring a
//! feature vector `x` means orthogonally projecting it onto the subspace,
//! `v = W (W^T W)^-1 W^T x`, and taking the projection's Euclidean length.
//! The cached c×c normalization matrix `sigma = (W^T W)^-1` is either
//! recomputed exactly after every weight update or maintained by one step of
//! the hyper-power iteration `sigma <- 2 sigma - sigma (W^T W) sigma`, which
//! converges quadratically to the Gram inverse from a close-enough start.
//!
//! The length gradient has a closed form: with `x_perp = x - v` the component
//! of `x` outside the subspace and `u = sigma W^T x` the basis coefficients
//! of the projection, `d|v|/dW = x_perp u^T / |v|` and `d|v|/dx = v / |v|`.
//! Every column of the weight gradient is a multiple of `x_perp`, so a basis
//! is only ever updated along the direction its subspace does not yet contain.
//!
//! The d×d projection matrix is never materialized outside tests; all
//! products are staged as (d×c)(c×c)(c×d) applied to vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, outer, LinalgError, Matrix, Vector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Default ridge added to the Gram matrix when the unshifted factorization
/// fails.
pub const DEFAULT_EPS: f64 = 1e-7;

/// Below this capsule length the length gradient is defined as zero:
/// `1e-12 * |x|`, with an absolute floor of `1e-300`.
pub fn length_guard(input_norm: f64) -> f64 {
    (1e-12 * input_norm).max(1e-300)
}

#[derive(Debug, Error)]
pub enum CapsuleError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("basis must satisfy 1 <= c < d, got d={d}, c={c}")]
    BadShape { d: usize, c: usize },
    #[error("rank-deficient basis: Gram inverse failed even with eps={eps:e}: {source}")]
    RankDeficient { eps: f64, source: LinalgError },
    #[error("hyper-power step diverged (non-finite sigma); re-initialize exactly")]
    SigmaDiverged,
    #[error("hyper-power step requires sigma_mode = HyperPower")]
    WrongSigmaMode,
    #[error("zero weight vector has no direction to normalize")]
    ZeroWeight,
}

/// How the cached Gram inverse is maintained across weight updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// Recompute `(W^T W)^-1` exactly after every update.
    Exact,
    /// One hyper-power recursion step after every update.
    HyperPower,
}

/// Outcome of an exact sigma refresh.
#[derive(Debug, Clone, Copy)]
pub struct SigmaRefresh {
    /// True when the unshifted factorization failed and the eps ridge was
    /// applied.
    pub used_eps_fallback: bool,
}

/// Orthogonal decomposition of an input against one subspace.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    capsule: Vector,
    length: f64,
    complement: Vector,
    coeffs: Vector,
    input_norm: f64,
}

impl ProjectionResult {
    /// The projection `v` of the input onto the subspace (dimension d).
    pub fn capsule(&self) -> &Vector {
        &self.capsule
    }

    /// `|v|`, the classification score contributed by this subspace.
    pub fn length(&self) -> f64 {
        self.length
    }

    /// `x - v`, the component of the input outside the subspace.
    pub fn complement(&self) -> &Vector {
        &self.complement
    }

    /// Coefficients `sigma W^T x` of the projection in the basis columns.
    pub fn coeffs(&self) -> &Vector {
        &self.coeffs
    }

    /// Norm of the projected input.
    pub fn input_norm(&self) -> f64 {
        self.input_norm
    }
}

/// Gradient of the capsule length wrt the basis and the input.
#[derive(Debug, Clone)]
pub struct LengthGradient {
    /// d×c, same shape as the basis.
    pub weight: Matrix,
    /// d, flows back into the feature extractor.
    pub input: Vector,
}

/// A class subspace: basis matrix, cached Gram inverse, maintenance policy.
#[derive(Debug, Clone)]
pub struct CapsuleSubspace {
    weight: Matrix,
    sigma: Matrix,
    sigma_mode: SigmaMode,
    eps: f64,
}

impl CapsuleSubspace {
    /// Builds a subspace from a d×c basis; sigma is initialized exactly.
    pub fn new(weight: Matrix, sigma_mode: SigmaMode, eps: f64) -> Result<Self, CapsuleError> {
        let (d, c) = (weight.rows(), weight.cols());
        if c < 1 || c >= d {
            return Err(CapsuleError::BadShape { d, c });
        }
        let mut s = Self {
            weight,
            sigma: Matrix::identity(c),
            sigma_mode,
            eps,
        };
        s.refresh_sigma()?;
        Ok(s)
    }

    /// Rebuilds a subspace from a stored basis and its cached sigma without
    /// recomputing anything, so deserialized models evaluate bit-identically.
    pub fn from_parts(
        weight: Matrix,
        sigma: Matrix,
        sigma_mode: SigmaMode,
        eps: f64,
    ) -> Result<Self, CapsuleError> {
        let (d, c) = (weight.rows(), weight.cols());
        if c < 1 || c >= d {
            return Err(CapsuleError::BadShape { d, c });
        }
        let mut s = Self {
            weight,
            sigma: Matrix::identity(c),
            sigma_mode,
            eps,
        };
        s.set_sigma(sigma)?;
        Ok(s)
    }

    /// Random basis with entries N(0, 1/d); well-conditioned Gram with
    /// overwhelming probability.
    pub fn random<R: Rng>(
        d: usize,
        c: usize,
        sigma_mode: SigmaMode,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self, CapsuleError> {
        let scale = 1.0 / (d as f64).sqrt();
        let data: Vec<f64> = (0..d * c)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
            .collect();
        let weight = Matrix::new(d, c, data).expect("consistent dims");
        Self::new(weight, sigma_mode, eps)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn capsule_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Gram matrix `W^T W` (c×c). Errors if the product overflows.
    pub fn gram(&self) -> Result<Matrix, CapsuleError> {
        let wt = self.weight.transpose();
        Ok(wt.matmul(&self.weight)?)
    }

    /// Recomputes sigma exactly. Tries the unshifted Gram first and falls
    /// back to `gram + eps * I` only if that factorization fails.
    pub fn refresh_sigma(&mut self) -> Result<SigmaRefresh, CapsuleError> {
        let gram = self.gram()?;
        match linalg::sym_inverse(&gram, 0.0) {
            Ok(sigma) => {
                self.sigma = sigma;
                Ok(SigmaRefresh {
                    used_eps_fallback: false,
                })
            }
            Err(first) => {
                if self.eps > 0.0 {
                    match linalg::sym_inverse(&gram, self.eps) {
                        Ok(sigma) => {
                            self.sigma = sigma;
                            Ok(SigmaRefresh {
                                used_eps_fallback: true,
                            })
                        }
                        Err(second) => Err(CapsuleError::RankDeficient {
                            eps: self.eps,
                            source: second,
                        }),
                    }
                } else {
                    Err(CapsuleError::RankDeficient {
                        eps: 0.0,
                        source: first,
                    })
                }
            }
        }
    }

    /// One hyper-power recursion step `sigma <- 2 sigma - sigma G sigma`,
    /// re-symmetrized as `(sigma + sigma^T) / 2` to suppress drift.
    pub fn hyperpower_step(&mut self) -> Result<(), CapsuleError> {
        if self.sigma_mode != SigmaMode::HyperPower {
            return Err(CapsuleError::WrongSigmaMode);
        }
        let gram = match self.gram() {
            Ok(g) => g,
            Err(CapsuleError::Linalg(e)) => return Err(step_divergence(e)),
            Err(e) => return Err(e),
        };
        let sg = self.sigma.matmul(&gram).map_err(step_divergence)?;
        let sgs = sg.matmul(&self.sigma).map_err(step_divergence)?;
        let mut next = self.sigma.scale(2.0);
        next.add_scaled(&sgs, -1.0)?;
        let next = symmetrize(&next);
        if !next.is_finite() {
            return Err(CapsuleError::SigmaDiverged);
        }
        self.sigma = next;
        Ok(())
    }

    /// Replaces sigma directly (diagnostics and benchmark trajectories).
    /// The replacement must be c×c, symmetric, and finite.
    pub fn set_sigma(&mut self, sigma: Matrix) -> Result<(), CapsuleError> {
        let c = self.capsule_dim();
        if sigma.rows() != c || sigma.cols() != c {
            return Err(CapsuleError::Linalg(LinalgError::ShapeMismatch {
                op: "set_sigma",
                lhs: (c, c),
                rhs: (sigma.rows(), sigma.cols()),
            }));
        }
        if !sigma.is_finite() {
            return Err(CapsuleError::Linalg(LinalgError::NonFinite {
                op: "set_sigma",
            }));
        }
        let asym = sigma.sub(&sigma.transpose())?.frobenius_norm();
        if asym > 1e-9 * sigma.frobenius_norm().max(1.0) {
            return Err(CapsuleError::Linalg(LinalgError::NotSymmetric));
        }
        self.sigma = sigma;
        Ok(())
    }

    /// `weight += scale * delta`, without sigma maintenance. The caller must
    /// refresh or step sigma before the next projection.
    pub fn update_weight(&mut self, delta: &Matrix, scale: f64) -> Result<(), CapsuleError> {
        self.weight.add_scaled(delta, scale)?;
        Ok(())
    }

    /// Orthogonal projection of `x` onto the subspace, staged right-to-left
    /// as `W (sigma (W^T x))`; the d×d projection matrix is never formed.
    pub fn project(&self, x: &Vector) -> Result<ProjectionResult, CapsuleError> {
        let wtx = self.weight.tmatvec(x)?;
        let coeffs = self.sigma.matvec(&wtx)?;
        let capsule = self.weight.matvec(&coeffs)?;
        let complement = x.sub(&capsule)?;
        Ok(ProjectionResult {
            length: capsule.norm2(),
            input_norm: x.norm2(),
            capsule,
            complement,
            coeffs,
        })
    }

    /// Analytical gradient of the capsule length wrt the basis and input.
    /// Below the [`length_guard`] threshold both gradients are zero.
    pub fn length_gradient(&self, x: &Vector) -> Result<LengthGradient, CapsuleError> {
        let proj = self.project(x)?;
        Ok(self.length_gradient_from(&proj))
    }

    /// Same as [`Self::length_gradient`], reusing a cached projection.
    pub fn length_gradient_from(&self, proj: &ProjectionResult) -> LengthGradient {
        let d = self.input_dim();
        let c = self.capsule_dim();
        if proj.length <= length_guard(proj.input_norm) {
            return LengthGradient {
                weight: Matrix::zeros(d, c),
                input: Vector::zeros(d),
            };
        }
        let inv_len = 1.0 / proj.length;
        let mut weight = outer(&proj.complement, &proj.coeffs);
        weight.scale_in_place(inv_len);
        let input = proj.capsule.scale(inv_len);
        LengthGradient { weight, input }
    }

    /// Length-preserving map into the subspace's own coordinates,
    /// `(W^T W)^(-1/2) W^T x` (c values; c = 2 for plotting).
    pub fn visualize_coords(&self, x: &Vector) -> Result<Vector, CapsuleError> {
        let gram = self.gram()?;
        let root = match linalg::sym_inv_sqrt(&gram, 0.0) {
            Ok(r) => r,
            Err(_) if self.eps > 0.0 => linalg::sym_inv_sqrt(&gram, self.eps)?,
            Err(e) => return Err(e.into()),
        };
        let wtx = self.weight.tmatvec(x)?;
        Ok(root.matvec(&wtx)?)
    }
}

/// Weight-normalized score `|w^T x| / |w|`: the c = 1 special case of the
/// capsule projection length.
pub fn weight_norm_length(w: &Vector, x: &Vector) -> Result<f64, CapsuleError> {
    let norm = w.norm2();
    if norm == 0.0 {
        return Err(CapsuleError::ZeroWeight);
    }
    Ok(w.dot(x)?.abs() / norm)
}

fn symmetrize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let n = m.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

fn step_divergence(e: LinalgError) -> CapsuleError {
    match e {
        LinalgError::NonFinite { .. } => CapsuleError::SigmaDiverged,
        other => CapsuleError::Linalg(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal_basis_3x2() -> Matrix {
        Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]])
    }

    #[test]
    fn sigma_of_orthonormal_basis_is_identity() {
        let s = CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::Exact, DEFAULT_EPS)
            .unwrap();
        let diff = s.sigma().sub(&Matrix::identity(2)).unwrap();
        assert!(diff.frobenius_norm() < 1e-12);
    }

    #[test]
    fn sigma_of_single_column_is_inverse_squared_norm() {
        let w = Matrix::from_rows(&[&[2.0], &[0.0], &[0.0]]);
        let s = CapsuleSubspace::new(w, SigmaMode::Exact, DEFAULT_EPS).unwrap();
        assert!((s.sigma().get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn construction_rejects_c_not_less_than_d() {
        let w = Matrix::identity(3);
        assert!(matches!(
            CapsuleSubspace::new(w, SigmaMode::Exact, DEFAULT_EPS),
            Err(CapsuleError::BadShape { d: 3, c: 3 })
        ));
    }

    #[test]
    fn rank_deficient_basis_with_zero_eps_fails() {
        let w = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            CapsuleSubspace::new(w, SigmaMode::Exact, 0.0),
            Err(CapsuleError::RankDeficient { .. })
        ));
    }

    #[test]
    fn rank_deficient_basis_uses_eps_fallback() {
        let w = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let mut s = CapsuleSubspace::new(w, SigmaMode::Exact, DEFAULT_EPS).unwrap();
        let refresh = s.refresh_sigma().unwrap();
        assert!(refresh.used_eps_fallback);
    }

    #[test]
    fn axis_aligned_projection() {
        let s = CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::Exact, DEFAULT_EPS)
            .unwrap();
        let x = Vector::from_slice(&[3.0, 4.0, 5.0]);
        let p = s.project(&x).unwrap();
        assert!((p.length() - 5.0).abs() < 1e-12);
        assert!(p.capsule().sub(&Vector::from_slice(&[3.0, 4.0, 0.0])).unwrap().norm2() < 1e-12);
        assert!(p.complement().sub(&Vector::from_slice(&[0.0, 0.0, 5.0])).unwrap().norm2() < 1e-12);
    }

    #[test]
    fn projection_is_identity_on_span() {
        let s = CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::Exact, DEFAULT_EPS)
            .unwrap();
        let x = Vector::from_slice(&[-2.0, 7.0, 0.0]);
        let p = s.project(&x).unwrap();
        assert!(p.complement().norm2() < 1e-12);
        assert!((p.length() - x.norm2()).abs() < 1e-12);
    }

    #[test]
    fn projection_dimension_mismatch_is_error() {
        let s = CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::Exact, DEFAULT_EPS)
            .unwrap();
        let x = Vector::from_slice(&[1.0, 2.0]);
        assert!(s.project(&x).is_err());
    }

    #[test]
    fn gradient_zero_when_input_inside_subspace() {
        let s = CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::Exact, DEFAULT_EPS)
            .unwrap();
        let x = Vector::from_slice(&[1.0, -2.0, 0.0]);
        let g = s.length_gradient(&x).unwrap();
        assert!(g.weight.frobenius_norm() < 1e-12);
        // grad_x is v/|v| = x/|x| here, not zero.
        assert!((g.input.norm2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_hand_checked_2d_case() {
        // W = [[1],[0]], x = [1,1]: v = [1,0], x_perp = [0,1],
        // coeffs = 1 -> grad_w = [[0],[1]], grad_x = [1,0].
        let w = Matrix::from_rows(&[&[1.0], &[0.0]]);
        let s = CapsuleSubspace::new(w, SigmaMode::Exact, DEFAULT_EPS).unwrap();
        let x = Vector::from_slice(&[1.0, 1.0]);
        let g = s.length_gradient(&x).unwrap();
        assert!((g.weight.get(0, 0) - 0.0).abs() < 1e-14);
        assert!((g.weight.get(1, 0) - 1.0).abs() < 1e-14);
        assert!((g.input.get(0) - 1.0).abs() < 1e-14);
        assert!(g.input.get(1).abs() < 1e-14);
    }

    #[test]
    fn gradient_zero_guard_below_threshold() {
        // x orthogonal to the subspace: capsule length is ~0.
        let s = CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::Exact, DEFAULT_EPS)
            .unwrap();
        let x = Vector::from_slice(&[0.0, 0.0, 9.0]);
        let g = s.length_gradient(&x).unwrap();
        assert_eq!(g.weight.frobenius_norm(), 0.0);
        assert_eq!(g.input.norm2(), 0.0);
    }

    #[test]
    fn hyperpower_fixed_point_is_exact_inverse() {
        let w = Matrix::from_rows(&[&[1.0, 0.5], &[0.5, 2.0], &[0.0, 1.0]]);
        let mut s = CapsuleSubspace::new(w, SigmaMode::HyperPower, DEFAULT_EPS).unwrap();
        let before = s.sigma().clone();
        s.hyperpower_step().unwrap();
        let drift = s.sigma().sub(&before).unwrap().frobenius_norm();
        assert!(drift < 1e-12, "fixed point drifted by {drift:e}");
    }

    #[test]
    fn hyperpower_scalar_recursion_sequence() {
        // Orthonormal columns: G = I, so sigma follows s <- 2s - s^2.
        let mut s =
            CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::HyperPower, DEFAULT_EPS)
                .unwrap();
        s.set_sigma(Matrix::identity(2).scale(0.5)).unwrap();
        s.hyperpower_step().unwrap();
        assert!(s.sigma().sub(&Matrix::identity(2).scale(0.75)).unwrap().frobenius_norm() < 1e-15);
        s.hyperpower_step().unwrap();
        assert!(
            s.sigma().sub(&Matrix::identity(2).scale(0.9375)).unwrap().frobenius_norm() < 1e-15
        );
    }

    #[test]
    fn hyperpower_requires_matching_mode() {
        let mut s = CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::Exact, DEFAULT_EPS)
            .unwrap();
        assert!(matches!(
            s.hyperpower_step(),
            Err(CapsuleError::WrongSigmaMode)
        ));
    }

    #[test]
    fn weight_norm_simple_cases() {
        let w = Vector::from_slice(&[2.0, 0.0, 0.0]);
        let x = Vector::from_slice(&[3.0, 4.0, 0.0]);
        assert!((weight_norm_length(&w, &x).unwrap() - 3.0).abs() < 1e-15);

        // w parallel to x gives the full norm.
        let w = Vector::from_slice(&[1.0, 2.0, -1.0]);
        let x = w.scale(-3.5);
        assert!((weight_norm_length(&w, &x).unwrap() - x.norm2()).abs() < 1e-12);
    }

    #[test]
    fn weight_norm_rejects_zero_weight() {
        let w = Vector::zeros(3);
        let x = Vector::from_slice(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            weight_norm_length(&w, &x),
            Err(CapsuleError::ZeroWeight)
        ));
    }

    #[test]
    fn visualize_coords_orthonormal_basis_is_wtx() {
        let s = CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::Exact, DEFAULT_EPS)
            .unwrap();
        let x = Vector::from_slice(&[3.0, -1.0, 2.0]);
        let coords = s.visualize_coords(&x).unwrap();
        assert!(coords.sub(&Vector::from_slice(&[3.0, -1.0])).unwrap().norm2() < 1e-12);
    }

    #[test]
    fn visualize_coords_orthogonal_input_is_zero() {
        let s = CapsuleSubspace::new(orthonormal_basis_3x2(), SigmaMode::Exact, DEFAULT_EPS)
            .unwrap();
        let x = Vector::from_slice(&[0.0, 0.0, 4.0]);
        assert!(s.visualize_coords(&x).unwrap().norm2() < 1e-12);
    }
}
