//! The fixed transforms of the ensemble framework: the Gaussian initial
//! head G₀, the tanh-cubic λ head, and the monotonicity-preserving
//! piecewise-linear update g.

use crate::error::{EmqError, Result};
use crate::quant::QuantileGrid;

/// Q⁰ head: q⁰_k = μ + σ·Φ⁻¹(τ_k). `z_grid` is Φ⁻¹ over the grid, strictly
/// increasing, so the output is strictly increasing for any σ > 0.
pub fn gaussian_head_quantiles(mu: f64, sigma: f64, z_grid: &[f64]) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(EmqError::Domain(format!(
            "gaussian head requires sigma > 0, got {sigma}"
        )));
    }
    Ok(z_grid.iter().map(|&z| mu + sigma * z).collect())
}

/// λ_k = tanh(a₀ + a₁τ_k + a₂τ_k² + a₃τ_k³) for every grid level. tanh is
/// clamped a hair inside (-1, 1): in f64 it saturates to exactly ±1 for
/// |pre-activation| ≳ 19, and an exact ±1 would let adjacent quantiles meet.
pub fn lambda_head(coeffs: &[f64; 4], grid: &QuantileGrid) -> Vec<f64> {
    grid.levels()
        .iter()
        .map(|&t| {
            let p = coeffs[0] + t * (coeffs[1] + t * (coeffs[2] + t * coeffs[3]));
            p.tanh().clamp(-LAMBDA_CAP, LAMBDA_CAP)
        })
        .collect()
}

/// Largest λ magnitude admitted by the update; strictly below 1 in f64.
pub const LAMBDA_CAP: f64 = 1.0 - 1e-9;

/// Slope of the piecewise-linear g at λ_k, given the previous fan and virtual
/// endpoints ±B. Positive on both branches; λ = 0 uses the λ<0 branch.
#[inline]
pub(crate) fn g_slope(q_prev: &[f64], k: usize, lambda: f64, boundary_b: f64) -> f64 {
    // When an initial fan strays past ±B the virtual endpoint tracks it, so
    // both branch slopes stay non-negative and the fan cannot cross.
    let q_km1 = if k == 0 {
        (-boundary_b).min(q_prev[0])
    } else {
        q_prev[k - 1]
    };
    let q_kp1 = if k + 1 == q_prev.len() {
        boundary_b.max(q_prev[q_prev.len() - 1])
    } else {
        q_prev[k + 1]
    };
    if lambda > 0.0 {
        (q_kp1 - q_prev[k]) / 2.0 // r_k
    } else {
        (q_prev[k] - q_km1) / 2.0 // -l_k
    }
}

/// Apply the update qᵗ_k = q_k + g_k(λ_k) without input validation; the
/// training loop calls this on fans that are increasing by construction.
pub(crate) fn g_transform_unchecked(q_prev: &[f64], lambdas: &[f64], boundary_b: f64) -> Vec<f64> {
    (0..q_prev.len())
        .map(|k| q_prev[k] + g_slope(q_prev, k, lambdas[k], boundary_b) * lambdas[k])
        .collect()
}

/// One ensemble update of a quantile fan.
///
/// With r_k = (q_{k+1} - q_k)/2, l_k = (q_{k-1} - q_k)/2 and virtual
/// endpoints q₀ = -B, q_{K+1} = +B:
///   qᵗ_k = q_k + (-l_k + 1{λ_k > 0}(r_k + l_k))·λ_k.
/// The result stays strictly increasing for λ_k ∈ (-1, 1).
pub fn g_transform(q_prev: &[f64], lambdas: &[f64], boundary_b: f64) -> Result<Vec<f64>> {
    if q_prev.len() != lambdas.len() {
        return Err(EmqError::Dimension(format!(
            "fan length {} vs lambda length {}",
            q_prev.len(),
            lambdas.len()
        )));
    }
    if !(boundary_b > 0.0) {
        return Err(EmqError::Config("boundary B must be positive".into()));
    }
    if q_prev.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EmqError::Numeric(
            "g_transform input fan is not strictly increasing".into(),
        ));
    }
    if lambdas.iter().any(|&l| !(l.abs() < 1.0)) {
        return Err(EmqError::Domain(
            "all lambda values must lie strictly inside (-1, 1)".into(),
        ));
    }
    Ok(g_transform_unchecked(q_prev, lambdas, boundary_b))
}
