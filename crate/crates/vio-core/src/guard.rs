//! Bias-consistency safeguard and staged recovery.
//!
//! After each window solve, the preintegration residuals of the settled
//! frame pairs are compared against the same residuals evaluated with the
//! pre-solve biases. Dynamic-object contamination that leaks into the
//! bias estimates inflates these residuals in a correlated way; when too
//! many pairs degrade past a ratio threshold the solution is rejected.
//!
//! Recovery restores the pre-solve window, narrows the truncation shape so
//! borderline features are rejected more aggressively, and re-solves. If
//! no narrowing round passes the check the pre-solve window is kept (its
//! newest state is the IMU-propagated prediction).

use nalgebra::Vector3;

use crate::imu::{imu_residual, integrate, ImuNoiseParams, Preintegration, BIAS_REPROP_THRESHOLD};
use crate::kernel::{build_shape, narrow_shape};
use crate::solver::{
    alternate, optimize_states, reweight_with_shape, SolverConfig, Window,
};
use crate::state::BodyState;

/// Thresholds of the consistency check and its recovery loop.
#[derive(Debug, Clone)]
pub struct GuardConfig {
    /// A pair is anomalous when its residual ratio exceeds this.
    pub tau_r: f64,
    /// The window is inconsistent when more than this many pairs are anomalous.
    pub tau_a: usize,
    /// Narrowing rounds attempted before giving up.
    pub max_recovery_rounds: usize,
    /// Lower bound on the truncation radius while narrowing (px).
    pub narrow_floor: f64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            tau_r: 2.0,
            tau_a: 2,
            max_recovery_rounds: 3,
            narrow_floor: 0.5,
        }
    }
}

/// Result of one consistency check.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    /// Residual ratio per settled pair (newest pair excluded).
    pub ratios: Vec<f64>,
    pub anomalous: usize,
    pub consistent: bool,
}

/// Preintegration usable at `ba`/`bw`: the stored term when the shift from
/// its linearization point is small, otherwise a re-integration from raw
/// samples (falling back to the stored term when none are available).
fn effective_preint(
    pre: &Preintegration,
    raw: &[crate::imu::ImuSample],
    ba: &Vector3<f64>,
    bw: &Vector3<f64>,
    noise: &ImuNoiseParams,
) -> Preintegration {
    let shift = ((ba - pre.lin_ba).norm()).max((bw - pre.lin_bw).norm());
    if shift > BIAS_REPROP_THRESHOLD && raw.len() >= 2 {
        if let Ok(re) = integrate(raw, ba, bw, noise) {
            return re;
        }
    }
    pre.clone()
}

fn pair_residual_norm(
    window: &Window,
    k: usize,
    gravity: &Vector3<f64>,
    noise: &ImuNoiseParams,
    x_k: &BodyState,
    x_k1: &BodyState,
) -> Option<f64> {
    let slot = &window.slots[k + 1];
    let pre = slot.preint.as_ref()?;
    let eff = effective_preint(pre, &slot.raw_imu, &x_k.ba, &x_k.bw, noise);
    let res = imu_residual(&eff, x_k, x_k1, gravity, false);
    Some(res.raw.fixed_rows::<9>(0).norm())
}

/// Compares the settled preintegration residuals at the current states
/// against the same residuals with `reference_biases` (one `(ba, bw)` pair
/// per slot, captured before the solve). Position, orientation, and
/// velocity rows enter the norms; the residuals are not whitened, so the
/// ratio is invariant to the IMU noise scaling. The newest pair is skipped
/// because its state is the least constrained. Windows with fewer than
/// three slots are trivially consistent.
pub fn consistency_check(
    window: &Window,
    cfg: &SolverConfig,
    guard: &GuardConfig,
    noise: &ImuNoiseParams,
    reference_biases: &[(Vector3<f64>, Vector3<f64>)],
) -> ConsistencyReport {
    let m = window.slots.len();
    let mut ratios = Vec::new();
    for k in 0..m.saturating_sub(2) {
        let x_k = window.slots[k].state;
        let x_k1 = window.slots[k + 1].state;
        let Some(r_new) = pair_residual_norm(window, k, &cfg.gravity, noise, &x_k, &x_k1) else {
            continue;
        };
        let mut r_k = x_k;
        r_k.ba = reference_biases[k].0;
        r_k.bw = reference_biases[k].1;
        let mut r_k1 = x_k1;
        r_k1.ba = reference_biases[k + 1].0;
        r_k1.bw = reference_biases[k + 1].1;
        let Some(r_ref) = pair_residual_norm(window, k, &cfg.gravity, noise, &r_k, &r_k1) else {
            continue;
        };
        ratios.push(r_new / r_ref.max(1e-6));
    }
    let anomalous = ratios.iter().filter(|&&r| r > guard.tau_r).count();
    ConsistencyReport {
        ratios,
        anomalous,
        consistent: anomalous <= guard.tau_a,
    }
}

/// Outcome of a guarded window solve.
#[derive(Debug, Clone, Default)]
pub struct GuardedSolveReport {
    /// One entry per consistency check performed, in order.
    pub checks: Vec<ConsistencyReport>,
    /// The solve right after the alternation failed the check.
    pub first_check_failed: bool,
    /// Narrowing rounds executed.
    pub rounds_used: usize,
    /// The pre-solve window was kept.
    pub reverted: bool,
}

/// Solves the window with the configured method, applying the consistency
/// check and, when enabled, the narrowing recovery loop.
pub fn guarded_solve(
    window: &mut Window,
    cfg: &SolverConfig,
    guard: &GuardConfig,
    noise: &ImuNoiseParams,
    predicted: &BodyState,
) -> GuardedSolveReport {
    let mut report = GuardedSolveReport::default();
    if !cfg.method.uses_bcc() {
        alternate(window, cfg, predicted);
        return report;
    }
    let snapshot = window.clone();
    let reference_biases: Vec<_> = snapshot
        .slots
        .iter()
        .map(|s| (s.state.ba, s.state.bw))
        .collect();
    let alt = alternate(window, cfg, predicted);
    let check = consistency_check(window, cfg, guard, noise, &reference_biases);
    let consistent = check.consistent;
    report.checks.push(check);
    if consistent {
        return report;
    }
    report.first_check_failed = true;
    if !cfg.method.uses_ssr() {
        *window = snapshot;
        report.reverted = true;
        return report;
    }
    let mut shape = alt
        .shapes
        .last()
        .cloned()
        .or_else(|| build_shape(cfg.atls.r_max, cfg.atls.r_hat_floor).ok());
    for round in 1..=guard.max_recovery_rounds {
        let Some(prev) = shape else { break };
        let narrowed = narrow_shape(&prev, guard.narrow_floor);
        *window = snapshot.clone();
        reweight_with_shape(window, cfg, &narrowed, Some(predicted));
        optimize_states(window, cfg);
        shape = Some(narrowed);
        let check = consistency_check(window, cfg, guard, noise, &reference_biases);
        let consistent = check.consistent;
        report.checks.push(check);
        report.rounds_used = round;
        if consistent {
            return report;
        }
    }
    *window = snapshot;
    report.reverted = true;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::{integrate, propagate, ImuSample};
    use crate::solver::{FrameSlot, Method};
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    /// A window of `m` states chained by noise-free preintegrations over a
    /// smooth synthetic measurement stream with ground-truth biases. Each
    /// state is the exact propagation of the previous one, so the chain's
    /// residuals vanish at the true biases.
    fn chained_window(m: usize, ba: Vector3<f64>, bw: Vector3<f64>) -> (Window, SolverConfig) {
        let cfg = SolverConfig::new(Method::AtlsBccSsr);
        let noise = ImuNoiseParams::noiseless().floored();
        let mut w = Window::default();
        let mut state = BodyState {
            stamp: 0.0,
            p: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            v: Vector3::new(0.1, 0.0, 0.05),
            ba,
            bw,
        };
        w.slots.push(FrameSlot {
            state,
            is_keyframe: true,
            preint: None,
            raw_imu: Vec::new(),
        });
        let dt = 0.005;
        let steps = 40;
        for _ in 0..m - 1 {
            let samples: Vec<ImuSample> = (0..=steps)
                .map(|i| {
                    let t = state.stamp + i as f64 * dt;
                    ImuSample {
                        stamp: t,
                        a: Vector3::new(
                            0.3 * (2.0 * t).sin(),
                            -0.2 * (1.5 * t).cos(),
                            9.81 + 0.1 * (0.9 * t).sin(),
                        ) + ba,
                        w: Vector3::new(0.05 * t.cos(), 0.08, -0.04 * (0.7 * t).sin()) + bw,
                    }
                })
                .collect();
            let pre = integrate(&samples, &ba, &bw, &noise).unwrap();
            state = propagate(&state, &pre, &cfg.gravity).unwrap();
            w.slots.push(FrameSlot {
                state,
                is_keyframe: true,
                preint: Some(pre),
                raw_imu: samples,
            });
        }
        (w, cfg)
    }

    fn gt_biases(w: &Window) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        w.slots.iter().map(|s| (s.state.ba, s.state.bw)).collect()
    }

    #[test]
    fn clean_window_is_consistent() {
        let (w, cfg) = chained_window(6, Vector3::new(0.02, -0.01, 0.015), Vector3::new(0.002, 0.001, -0.001));
        let guard = GuardConfig::default();
        let noise = ImuNoiseParams::noiseless().floored();
        let rep = consistency_check(&w, &cfg, &guard, &noise, &gt_biases(&w));
        assert_eq!(rep.ratios.len(), 4);
        assert!(rep.consistent);
        for r in &rep.ratios {
            assert!(*r <= 1.0 + 1e-9, "ratio {r} should not exceed 1 at truth");
        }
    }

    #[test]
    fn corrupted_biases_fail_the_check() {
        let (mut w, cfg) = chained_window(6, Vector3::zeros(), Vector3::zeros());
        let reference = gt_biases(&w);
        // The optimizer supposedly dragged every bias away from truth.
        for slot in w.slots.iter_mut() {
            slot.state.ba += Vector3::new(0.05, -0.03, 0.04);
            slot.state.bw += Vector3::new(0.004, 0.003, -0.005);
        }
        let guard = GuardConfig::default();
        let noise = ImuNoiseParams::noiseless().floored();
        let rep = consistency_check(&w, &cfg, &guard, &noise, &reference);
        assert!(!rep.consistent, "ratios {:?}", rep.ratios);
        assert!(rep.anomalous > guard.tau_a);
    }

    #[test]
    fn newest_pair_is_excluded_from_the_check() {
        let (mut w, cfg) = chained_window(3, Vector3::zeros(), Vector3::zeros());
        let reference = gt_biases(&w);
        // Corrupt only the newest state's bias: it affects only the newest
        // pair, which the check must ignore.
        let last = w.slots.len() - 1;
        w.slots[last].state.ba += Vector3::new(0.08, 0.0, -0.06);
        let guard = GuardConfig::default();
        let noise = ImuNoiseParams::noiseless().floored();
        let rep = consistency_check(&w, &cfg, &guard, &noise, &reference);
        assert_eq!(rep.ratios.len(), 1);
        assert!(rep.consistent);
    }

    #[test]
    fn large_bias_shifts_trigger_reintegration() {
        let (mut w, cfg) = chained_window(5, Vector3::zeros(), Vector3::zeros());
        let reference = gt_biases(&w);
        for slot in w.slots.iter_mut() {
            slot.state.ba += Vector3::new(0.15, 0.0, 0.0); // beyond the repropagation limit
        }
        let guard = GuardConfig::default();
        let noise = ImuNoiseParams::noiseless().floored();
        let rep = consistency_check(&w, &cfg, &guard, &noise, &reference);
        for r in &rep.ratios {
            assert!(r.is_finite());
            assert!(*r > guard.tau_r, "shift should look anomalous, got {r}");
        }
        assert!(!rep.consistent);
    }

    #[test]
    fn ratios_ignore_noise_scaling() {
        let (mut w, cfg) = chained_window(6, Vector3::zeros(), Vector3::zeros());
        let reference = gt_biases(&w);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for slot in w.slots.iter_mut() {
            slot.state.ba += 0.02 * Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        }
        let guard = GuardConfig::default();
        let quiet = ImuNoiseParams::noiseless().floored();
        let loud = ImuNoiseParams {
            acc_noise: quiet.acc_noise * 1e3,
            gyro_noise: quiet.gyro_noise * 1e3,
            acc_walk: quiet.acc_walk * 1e3,
            gyro_walk: quiet.gyro_walk * 1e3,
        };
        let a = consistency_check(&w, &cfg, &guard, &quiet, &reference);
        let b = consistency_check(&w, &cfg, &guard, &loud, &reference);
        for (x, y) in a.ratios.iter().zip(&b.ratios) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn plain_methods_bypass_the_guard() {
        let (mut w, _) = chained_window(4, Vector3::zeros(), Vector3::zeros());
        let cfg = SolverConfig::new(Method::PlainLs);
        let guard = GuardConfig::default();
        let noise = ImuNoiseParams::noiseless().floored();
        let predicted = w.slots.last().unwrap().state;
        let rep = guarded_solve(&mut w, &cfg, &guard, &noise, &predicted);
        assert!(rep.checks.is_empty());
        assert!(!rep.reverted);
    }
}
