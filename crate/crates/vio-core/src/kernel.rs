//! Adaptive truncated least squares (ATLS) weighting kernel.
//!
//! Each feature carries a weight `ω ∈ [0, 1]` multiplying its visual
//! residuals. The kernel couples the weight to a penalty `Φ(ω)` so that
//! minimizing `ω·r̂² + Φ(ω)` in `ω` has a closed form, and the resulting
//! effective cost is quadratic for small residuals, saturates at
//! `r̂_max · r_trunc` for residuals beyond the truncation range, and is
//! continuous in between. The truncation range adapts to the largest
//! residual among currently trusted (`ω = 1`) optimized features, so the
//! rejection region tracks the quality of the current state estimate.

use thiserror::Error;

/// Weights within this distance of 1 are treated as exactly 1. This keeps
/// the trusted set stable when the closed-form update returns `1 - ε` for
/// the feature that itself defines `r̂_max`.
pub const WEIGHT_ONE_TOL: f64 = 1e-9;

/// Numerical floors keeping degenerate shapes well-defined.
const MIN_R_HAT: f64 = 1e-9;
const MIN_R_TRUNC: f64 = 2e-9;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("maximum residual bound must be positive (got {0})")]
    NonPositiveRMax(f64),
}

/// Kernel configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlsConfig {
    /// Upper bound on the truncation range (pixels).
    pub r_max: f64,
    /// Lower bound applied to `r̂_max` (pixels). Keeps the truncation range
    /// from collapsing when residuals are near zero.
    pub r_hat_floor: f64,
}

impl Default for AtlsConfig {
    fn default() -> Self {
        Self {
            r_max: 10.0,
            r_hat_floor: 1.0,
        }
    }
}

/// A fully determined kernel shape for one weight-update pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlsShape {
    /// Upper bound on the truncation range (pixels).
    pub r_max: f64,
    /// Largest residual among trusted features (pixels), clamped below
    /// `r_trunc` so the penalty stays finite.
    pub r_hat_max: f64,
    /// Truncation range (pixels): residuals at or beyond it get `ω = 0`.
    pub r_trunc: f64,
    /// Penalty curvature parameter.
    pub mu: f64,
}

/// Largest current residual magnitude among fully trusted features.
///
/// Only entries with `ω = 1` (within [`WEIGHT_ONE_TOL`]) participate; the
/// result is floored by `cfg.r_hat_floor`, which is also returned when no
/// trusted feature exists.
pub fn compute_r_hat_max(residuals_and_weights: &[(f64, f64)], cfg: &AtlsConfig) -> f64 {
    let max_trusted = residuals_and_weights
        .iter()
        .filter(|(_, w)| *w >= 1.0 - WEIGHT_ONE_TOL)
        .map(|(r, _)| r.abs())
        .fold(f64::NEG_INFINITY, f64::max);
    if max_trusted.is_finite() {
        max_trusted.max(cfg.r_hat_floor)
    } else {
        cfg.r_hat_floor
    }
}

/// Builds the kernel shape for a given residual scale.
pub fn build_shape(r_max: f64, r_hat_max: f64) -> Result<AtlsShape, KernelError> {
    if r_max <= 0.0 {
        return Err(KernelError::NonPositiveRMax(r_max));
    }
    let r_hat = r_hat_max.max(MIN_R_HAT);
    let r_trunc = (2.0 * r_hat).min(r_max).max(MIN_R_TRUNC);
    // Keep r_hat_max strictly inside the truncation range so mu is finite.
    let r_hat = r_hat.min(r_trunc * (1.0 - 1e-6));
    let mu = r_hat / (r_trunc - r_hat);
    Ok(AtlsShape {
        r_max,
        r_hat_max: r_hat,
        r_trunc,
        mu,
    })
}

/// Halves the truncation range in place (state-recovery narrowing),
/// respecting `floor` and re-deriving `mu`.
pub fn narrow_shape(shape: &AtlsShape, floor: f64) -> AtlsShape {
    let r_trunc = (shape.r_trunc * 0.5).max(floor).max(MIN_R_TRUNC);
    let r_hat = shape.r_hat_max.min(r_trunc * (1.0 - 1e-6));
    AtlsShape {
        r_max: shape.r_max,
        r_hat_max: r_hat,
        r_trunc,
        mu: r_hat / (r_trunc - r_hat),
    }
}

/// Penalty `Φ(ω)` paid for down-weighting a feature.
pub fn penalty(shape: &AtlsShape, omega: f64) -> f64 {
    shape.mu * shape.r_hat_max * shape.r_trunc * (1.0 - omega) / (shape.mu + omega)
}

/// Closed-form minimizer of `ω·r̂² + Φ(ω)` over `ω ∈ [0, 1]`.
pub fn weight_update(shape: &AtlsShape, r_hat_j: f64) -> f64 {
    let r = r_hat_j.abs();
    if r * r < shape.r_hat_max * shape.r_hat_max {
        return 1.0;
    }
    if r * r >= shape.r_trunc * shape.r_trunc {
        return 0.0;
    }
    let omega =
        (shape.mu * (shape.mu + 1.0) * shape.r_hat_max * shape.r_trunc).sqrt() / r - shape.mu;
    let omega = omega.clamp(0.0, 1.0);
    if omega >= 1.0 - WEIGHT_ONE_TOL {
        1.0
    } else {
        omega
    }
}

/// Weights may only decrease across windows for a live track.
pub fn clamp_weight(new_weight: f64, previous_weight: f64) -> f64 {
    new_weight.min(previous_weight)
}

/// Residual magnitude driving the weight of a not-yet-graduated feature:
/// the worst reprojection error across its window observations.
///
/// Returns `None` for an empty set (untriangulatable feature — excluded
/// from this window).
pub fn new_feature_residual(observation_residuals: &[f64]) -> Option<f64> {
    observation_residuals
        .iter()
        .map(|r| r.abs())
        .fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |a| a.max(r)))
        })
}

/// Effective robust cost `ρ(r̂²) = ω̂·r̂² + Φ(ω̂)` at the optimal weight.
pub fn effective_cost(shape: &AtlsShape, r_hat_j: f64) -> f64 {
    let w = weight_update(shape, r_hat_j);
    w * r_hat_j * r_hat_j + penalty(shape, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn r_hat_max_takes_max_over_trusted() {
        let cfg = AtlsConfig::default();
        let all_trusted = [(1.0, 1.0), (2.5, 1.0), (0.3, 1.0)];
        assert_eq!(compute_r_hat_max(&all_trusted, &cfg), 2.5);

        let mixed = [(1.0, 1.0), (9.0, 0.4)];
        assert_eq!(compute_r_hat_max(&mixed, &cfg), 1.0);
    }

    #[test]
    fn r_hat_max_floors_empty_and_tiny_sets() {
        let cfg = AtlsConfig::default();
        assert_eq!(compute_r_hat_max(&[], &cfg), cfg.r_hat_floor);
        // Near-perfect residuals must not collapse the truncation range.
        let tiny = [(1e-9, 1.0), (2e-9, 1.0)];
        assert_eq!(compute_r_hat_max(&tiny, &cfg), cfg.r_hat_floor);
    }

    #[test]
    fn shape_examples() {
        let s = build_shape(10.0, 3.0).unwrap();
        assert_relative_eq!(s.r_trunc, 6.0);
        assert_relative_eq!(s.mu, 1.0);

        let s = build_shape(10.0, 7.0).unwrap();
        assert_relative_eq!(s.r_trunc, 10.0);
        assert_relative_eq!(s.mu, 7.0 / 3.0, epsilon = 1e-12);

        assert!(build_shape(0.0, 1.0).is_err());
        assert!(build_shape(-1.0, 1.0).is_err());
    }

    #[test]
    fn shape_handles_r_hat_beyond_r_max() {
        // Trusted residuals can exceed r_max when a trusted cluster moves;
        // the shape must stay finite and reject anything >= r_trunc.
        let s = build_shape(10.0, 12.0).unwrap();
        assert_relative_eq!(s.r_trunc, 10.0);
        assert!(s.r_hat_max < s.r_trunc);
        assert!(s.mu.is_finite());
        assert_eq!(weight_update(&s, 11.0), 0.0);
        assert_eq!(weight_update(&s, 10.0), 0.0);
        assert_eq!(weight_update(&s, 5.0), 1.0);
    }

    #[test]
    fn penalty_examples() {
        let s = build_shape(10.0, 3.0).unwrap();
        assert_relative_eq!(penalty(&s, 1.0), 0.0);
        assert_relative_eq!(penalty(&s, 0.0), s.r_hat_max * s.r_trunc, epsilon = 1e-9);
    }

    #[test]
    fn weight_update_branches() {
        let s = build_shape(10.0, 3.0).unwrap();
        assert_eq!(weight_update(&s, 2.0), 1.0);
        assert_eq!(weight_update(&s, 8.0), 0.0);
        assert_relative_eq!(weight_update(&s, 4.0), 0.5, epsilon = 1e-9);
        // Continuity at both region boundaries.
        assert_relative_eq!(weight_update(&s, 3.0), 1.0);
        assert_relative_eq!(weight_update(&s, 6.0 - 1e-9), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn weight_clamp_is_min() {
        assert_eq!(clamp_weight(0.8, 0.5), 0.5);
        assert_eq!(clamp_weight(0.2, 0.5), 0.2);
    }

    #[test]
    fn new_feature_residual_is_max() {
        assert_eq!(new_feature_residual(&[0.5, 3.2, 1.1]), Some(3.2));
        assert_eq!(new_feature_residual(&[]), None);
    }

    #[test]
    fn narrowing_halves_with_floor() {
        let s = build_shape(10.0, 4.0).unwrap();
        let n1 = narrow_shape(&s, 0.5);
        assert_relative_eq!(n1.r_trunc, 4.0);
        assert!(n1.r_hat_max < n1.r_trunc);
        let n2 = narrow_shape(&narrow_shape(&narrow_shape(&n1, 0.5), 0.5), 0.5);
        assert_relative_eq!(n2.r_trunc, 0.5);
        let n3 = narrow_shape(&n2, 0.5);
        assert_relative_eq!(n3.r_trunc, 0.5);
    }

    /// Independent check of the closed form: two-stage grid search over
    /// `ω ∈ [0, 1]` for the minimizer of `ω·r̂² + Φ(ω)`.
    fn grid_argmin(shape: &AtlsShape, r: f64) -> f64 {
        let f = |w: f64| w * r * r + penalty(shape, w);
        let coarse = 1000;
        let mut best = (f(0.0), 0.0);
        for i in 0..=coarse {
            let w = i as f64 / coarse as f64;
            let c = f(w);
            if c < best.0 {
                best = (c, w);
            }
        }
        let lo = (best.1 - 2e-3).max(0.0);
        let hi = (best.1 + 2e-3).min(1.0);
        let fine = 4000;
        for i in 0..=fine {
            let w = lo + (hi - lo) * i as f64 / fine as f64;
            let c = f(w);
            if c < best.0 {
                best = (c, w);
            }
        }
        best.1
    }

    #[test]
    fn closed_form_matches_grid_search() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..40 {
            let r_max = 2.0 + rng.random::<f64>() * 18.0;
            let r_hat_max = r_max * (0.05 + rng.random::<f64>() * 1.1);
            let shape = build_shape(r_max, r_hat_max).unwrap();
            for _ in 0..40 {
                let r = rng.random::<f64>() * r_max * 1.5;
                let analytic = weight_update(&shape, r);
                let grid = grid_argmin(&shape, r);
                assert!(
                    (analytic - grid).abs() <= 1e-4,
                    "shape {shape:?} r {r}: closed form {analytic} vs grid {grid}"
                );
            }
        }
    }

    #[test]
    fn effective_cost_saturates_and_is_continuous() {
        let s = build_shape(10.0, 3.0).unwrap();
        let plateau = s.r_hat_max * s.r_trunc;
        for r in [6.0, 7.5, 9.0, 20.0] {
            assert_relative_eq!(effective_cost(&s, r), plateau, epsilon = 1e-9);
        }
        // Continuity at r_hat_max and r_trunc.
        let eps = 1e-7;
        let at = effective_cost(&s, s.r_hat_max);
        assert!((effective_cost(&s, s.r_hat_max - eps) - at).abs() < 1e-5);
        assert!((effective_cost(&s, s.r_hat_max + eps) - at).abs() < 1e-5);
        let at_t = effective_cost(&s, s.r_trunc);
        assert!((effective_cost(&s, s.r_trunc - eps) - at_t).abs() < 1e-5);
    }
}
