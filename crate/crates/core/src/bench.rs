//! Exact vs hyper-power sigma maintenance under a drifting basis.
//!
//! Simulates the training-time situation: the basis takes a small random step
//! each iteration, and the Gram inverse is maintained either by an exact
//! refresh or by one hyper-power step. Reports per-step cost for both modes
//! and how far the hyper-power estimate drifts from a true inverse
//! (`max |sigma G - I|_F` over the trajectory).

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::capsule::{CapsuleError, CapsuleSubspace, SigmaMode, DEFAULT_EPS};
use crate::linalg::Matrix;
use crate::seed::stream_rng;

#[derive(Debug, Clone, Serialize)]
pub struct SigmaBenchEntry {
    pub d: usize,
    pub c: usize,
    pub steps: usize,
    pub exact_seconds_per_step: f64,
    pub hyper_seconds_per_step: f64,
    /// Largest hyper-power residual `|sigma G - I|_F` seen on the trajectory.
    pub max_residual: f64,
    pub final_residual: f64,
    /// Exact refreshes that needed the eps ridge.
    pub eps_fallbacks: usize,
    /// Hyper-power steps that diverged and forced an exact re-init.
    pub divergence_reinits: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SigmaBenchReport {
    pub drift: f64,
    pub entries: Vec<SigmaBenchEntry>,
}

/// Residual of a sigma estimate against the current Gram matrix.
fn residual(subspace: &CapsuleSubspace) -> Result<f64, CapsuleError> {
    let sg = subspace.sigma().matmul(&subspace.gram()?)?;
    let c = subspace.capsule_dim();
    Ok(sg.sub(&Matrix::identity(c))?.frobenius_norm())
}

/// Runs one (d, c) trajectory for `steps` iterations. `initial` overrides the
/// random starting basis (used to probe near-rank-deficient cases).
pub fn sigma_trajectory(
    d: usize,
    c: usize,
    steps: usize,
    seed: u64,
    drift: f64,
    initial: Option<Matrix>,
) -> Result<SigmaBenchEntry, CapsuleError> {
    let mut rng = stream_rng(seed, &format!("bench/sigma/{d}x{c}"));
    let mut eps_fallbacks = 0usize;
    let mut divergence_reinits = 0usize;

    let (mut exact, mut hyper) = match initial {
        Some(w) => {
            // A deliberately bad basis may need the ridge from the start.
            let mut exact = CapsuleSubspace::new(w.clone(), SigmaMode::Exact, DEFAULT_EPS)?;
            if exact.refresh_sigma()?.used_eps_fallback {
                eps_fallbacks += 1;
            }
            let mut hyper = CapsuleSubspace::new(w, SigmaMode::HyperPower, DEFAULT_EPS)?;
            hyper.set_sigma(exact.sigma().clone())?;
            (exact, hyper)
        }
        None => {
            let exact = CapsuleSubspace::random(d, c, SigmaMode::Exact, DEFAULT_EPS, &mut rng)?;
            let mut hyper = CapsuleSubspace::new(
                exact.weight().clone(),
                SigmaMode::HyperPower,
                DEFAULT_EPS,
            )?;
            hyper.set_sigma(exact.sigma().clone())?;
            (exact, hyper)
        }
    };

    let step_scale = drift / (d as f64).sqrt();
    let mut exact_seconds = 0.0;
    let mut hyper_seconds = 0.0;
    let mut max_residual = 0.0f64;
    let mut final_residual = 0.0f64;

    for _ in 0..steps {
        let delta_data: Vec<f64> = (0..d * c)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * step_scale)
            .collect();
        let delta = Matrix::new(d, c, delta_data).expect("consistent dims");
        exact.update_weight(&delta, 1.0)?;
        hyper.update_weight(&delta, 1.0)?;

        let t = Instant::now();
        let refresh = exact.refresh_sigma()?;
        exact_seconds += t.elapsed().as_secs_f64();
        if refresh.used_eps_fallback {
            eps_fallbacks += 1;
        }

        let t = Instant::now();
        match hyper.hyperpower_step() {
            Ok(()) => {}
            Err(CapsuleError::SigmaDiverged) => {
                divergence_reinits += 1;
                if hyper.refresh_sigma()?.used_eps_fallback {
                    eps_fallbacks += 1;
                }
            }
            Err(e) => return Err(e),
        }
        hyper_seconds += t.elapsed().as_secs_f64();

        final_residual = residual(&hyper)?;
        max_residual = max_residual.max(final_residual);
    }

    Ok(SigmaBenchEntry {
        d,
        c,
        steps,
        exact_seconds_per_step: exact_seconds / steps.max(1) as f64,
        hyper_seconds_per_step: hyper_seconds / steps.max(1) as f64,
        max_residual,
        final_residual,
        eps_fallbacks,
        divergence_reinits,
    })
}

/// The default (d, c) grid: d in {16, 64, 128}, c in {1, 2, 4, 8}.
pub fn default_grid(steps: usize, seed: u64, drift: f64) -> Result<SigmaBenchReport, CapsuleError> {
    let mut entries = Vec::new();
    for &d in &[16usize, 64, 128] {
        for &c in &[1usize, 2, 4, 8] {
            if c >= d {
                continue;
            }
            entries.push(sigma_trajectory(d, c, steps, seed, drift, None)?);
        }
    }
    Ok(SigmaBenchReport { drift, entries })
}
