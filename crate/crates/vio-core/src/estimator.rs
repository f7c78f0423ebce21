//! Frame-by-frame estimation pipeline.
//!
//! Each camera frame is preintegrated from the previous one, appended to
//! the sliding window, and solved with the configured method. The window
//! converges to parallax-spaced keyframes plus the incoming frame: a
//! previous frame that never earned keyframe status is discarded before the
//! next one enters (its IMU samples are chained into the following
//! preintegration), and once the window holds `max_slots` keyframes the
//! oldest is marginalized into the prior.

use std::time::Instant;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::guard::{guarded_solve, GuardConfig};
use crate::imu::{integrate, propagate, ImuNoiseParams, ImuSample};
use crate::marginal::drop_slot_from_prior;
use crate::solver::{marginalize_oldest, FrameSlot, SolverConfig, Window};
use crate::state::{BodyState, Feature, FeatureCategory};
use crate::vision::{rotation_compensated_parallax, triangulate_two_view, MIN_DEPTH};

/// Matching tolerance for shared boundary IMU samples (s).
const STAMP_EPS: f64 = 1e-6;

/// Front-end and window-management tuning.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub solver: SolverConfig,
    pub guard: GuardConfig,
    pub imu_noise: ImuNoiseParams,
    /// Window capacity in frames.
    pub max_slots: usize,
    /// Average rotation-compensated parallax that promotes a frame to
    /// keyframe (px).
    pub keyframe_parallax: f64,
    /// Window observations required before a track joins the long-tracked
    /// pool. Retained observations are keyframe-spaced, so this also sets
    /// the minimum track span at which a moving point can no longer pass
    /// for a static one.
    pub graduation_obs: usize,
    /// Estimates farther than this from the origin count as diverged (m).
    pub divergence_radius: f64,
}

impl EstimatorConfig {
    pub fn new(solver: SolverConfig) -> Self {
        Self {
            solver,
            guard: GuardConfig::default(),
            imu_noise: ImuNoiseParams::default(),
            max_slots: 9,
            keyframe_parallax: 10.0,
            graduation_obs: 7,
            divergence_radius: 100.0,
        }
    }
}

/// Keyframes required in the window before bundle adjustment runs.
///
/// Until then states advance by IMU propagation alone: two-view depths at
/// millimetric baselines are pure detection noise, and a solve that trusts
/// them wrecks the bias estimates it is supposed to refine.
const MIN_KEYFRAMES_FOR_SOLVE: usize = 5;

/// Per-frame outcome.
#[derive(Debug, Clone)]
pub struct FrameReport {
    pub stamp: f64,
    pub state: BodyState,
    pub solved: bool,
    pub is_keyframe: bool,
    /// Tracking was lost and the window restarted from the prediction.
    pub reset: bool,
    pub diverged: bool,
}

/// Row of the per-frame feature weight trace.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub stamp: f64,
    pub feature_id: u64,
    pub weight: f64,
}

/// Row of the per-frame bias trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub stamp: f64,
    pub ba: Vector3<f64>,
    pub bw: Vector3<f64>,
}

/// Row of the consistency-check trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BccRow {
    /// Index of the solved window (one per solve call).
    pub window: u64,
    /// Anomalous pairs found by the check.
    pub anomalous: usize,
    /// Recovery round the check belongs to (0 = first check).
    pub round: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Traces {
    pub weights: Vec<WeightRow>,
    pub bias: Vec<BiasRow>,
    pub bcc: Vec<BccRow>,
}

/// Sliding-window visual-inertial estimator.
pub struct Estimator {
    pub cfg: EstimatorConfig,
    window: Window,
    trajectory: Vec<BodyState>,
    traces: Traces,
    frame_counter: u64,
    solve_counter: u64,
    keyframe_count: usize,
    recovery_count: usize,
    reset_count: usize,
    solve_time_ms: f64,
    diverged: bool,
    /// IMU samples of a just-discarded frame, awaiting re-chaining.
    pending_chain: Vec<ImuSample>,
}

impl Estimator {
    /// Starts from a known initial state and the first frame's
    /// observations (the seed slot is a keyframe).
    pub fn new(
        cfg: EstimatorConfig,
        initial: BodyState,
        initial_obs: &[(u64, Vector2<f64>)],
    ) -> Self {
        let mut window = Window {
            slots: vec![FrameSlot {
                state: initial,
                is_keyframe: true,
                preint: None,
                raw_imu: Vec::new(),
            }],
            ..Window::default()
        };
        for &(id, px) in initial_obs {
            let mut f = Feature::new(id);
            f.obs.push((0, px));
            window.features.insert(id, f);
        }
        Self {
            cfg,
            window,
            trajectory: vec![initial],
            traces: Traces::default(),
            frame_counter: 0,
            solve_counter: 0,
            keyframe_count: 0,
            recovery_count: 0,
            reset_count: 0,
            solve_time_ms: 0.0,
            diverged: false,
            pending_chain: Vec::new(),
        }
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn trajectory(&self) -> &[BodyState] {
        &self.trajectory
    }

    pub fn traces(&self) -> &Traces {
        &self.traces
    }

    pub fn recovery_count(&self) -> usize {
        self.recovery_count
    }

    pub fn reset_count(&self) -> usize {
        self.reset_count
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframe_count
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    /// Mean wall-clock time per window solve (ms).
    pub fn mean_solve_ms(&self) -> f64 {
        if self.solve_counter == 0 {
            0.0
        } else {
            self.solve_time_ms / self.solve_counter as f64
        }
    }

    /// Index of the most recent keyframe slot.
    fn latest_keyframe(&self) -> Option<usize> {
        self.window
            .slots
            .iter()
            .enumerate()
            .rev()
            .find(|(_, s)| s.is_keyframe)
            .map(|(i, _)| i)
    }

    /// Makes room for a new frame.
    ///
    /// A previous frame that never earned keyframe status is discarded (its
    /// IMU samples are chained into the next interval), so the window
    /// converges to keyframes plus the incoming frame. Keeping the window
    /// spaced by parallax is what exposes dynamic objects: over a span of
    /// keyframes a moving point can no longer be explained by adjusting its
    /// depth. Once the window is full of keyframes, the oldest is
    /// marginalized into the prior.
    fn slide(&mut self) {
        let m = self.window.slots.len();
        if m >= 2 && !self.window.slots[m - 1].is_keyframe {
            self.discard_newest();
            return;
        }
        if m >= self.cfg.max_slots {
            self.marginalize_front();
        }
    }

    /// Folds slot 0 into the prior, re-anchors its features, and shifts the
    /// window down by one.
    fn marginalize_front(&mut self) {
        self.window.prior = marginalize_oldest(&self.window, &self.cfg.solver);
        let cam = &self.cfg.solver.camera;
        let old_anchor_state = self.window.slots[0].state;
        let mut dropped = Vec::new();
        for (&id, f) in self.window.features.iter_mut() {
            let Some(&(first_slot, first_px)) = f.obs.first() else {
                dropped.push(id);
                continue;
            };
            if first_slot == 0 {
                // Transfer the inverse depth to the next observing camera.
                let new_depth = f.inv_depth.and_then(|l| {
                    if !(l > 0.0) {
                        return None;
                    }
                    let ray = cam.normalized_ray(&first_px);
                    let p_body = cam.r_bc * (ray / l) + cam.p_bc;
                    let p_world = old_anchor_state.q * p_body + old_anchor_state.p;
                    let (next_slot, _) = *f.obs.get(1)?;
                    let ns = &self.window.slots[next_slot].state;
                    let in_body = ns.q.inverse_transform_vector(&(p_world - ns.p));
                    let in_cam = cam.r_bc.transpose() * (in_body - cam.p_bc);
                    (in_cam.z > MIN_DEPTH).then(|| 1.0 / in_cam.z)
                });
                f.obs.remove(0);
                f.inv_depth = new_depth;
            }
            f.obs.retain(|(s, _)| *s != 0);
            if f.obs.is_empty() {
                dropped.push(id);
                continue;
            }
            for o in f.obs.iter_mut() {
                o.0 -= 1;
            }
        }
        for id in dropped {
            self.window.features.remove(&id);
        }
        self.window.slots.remove(0);
        self.window.slots[0].preint = None;
        self.window.slots[0].raw_imu.clear();
    }

    /// Removes the newest (non-key) frame; its IMU samples are handed back
    /// so the next preintegration spans the gap.
    fn discard_newest(&mut self) {
        let idx = self.window.slots.len() - 1;
        let slot = self.window.slots.remove(idx);
        let mut dropped = Vec::new();
        for (&id, f) in self.window.features.iter_mut() {
            f.obs.retain(|(s, _)| *s != idx);
            if f.obs.is_empty() {
                dropped.push(id);
            }
        }
        for id in dropped {
            self.window.features.remove(&id);
        }
        if let Some(prior) = &self.window.prior {
            if prior.lin.len() > idx {
                self.window.prior = Some(drop_slot_from_prior(prior, idx));
            }
        }
        // Chain the discarded samples ahead of the next interval.
        self.pending_chain = slot.raw_imu;
    }

    /// Restarts the window from a single seed frame, keeping only the
    /// current frame's observations as fresh tracks.
    fn reset(&mut self, state: BodyState, obs: &[(u64, Vector2<f64>)]) {
        self.window = Window {
            slots: vec![FrameSlot {
                state,
                is_keyframe: true,
                preint: None,
                raw_imu: Vec::new(),
            }],
            ..Window::default()
        };
        for &(id, px) in obs {
            let mut f = Feature::new(id);
            f.obs.push((0, px));
            self.window.features.insert(id, f);
        }
        self.reset_count += 1;
    }

    /// Processes one camera frame.
    ///
    /// `imu` must cover the interval from the previous frame to `stamp`,
    /// with the boundary samples included on both ends.
    pub fn process_frame(
        &mut self,
        stamp: f64,
        obs: &[(u64, Vector2<f64>)],
        imu: &[ImuSample],
    ) -> FrameReport {
        let last_state = *self.trajectory.last().unwrap();
        if self.diverged {
            return FrameReport {
                stamp,
                state: last_state,
                solved: false,
                is_keyframe: false,
                reset: false,
                diverged: true,
            };
        }
        self.frame_counter += 1;

        // Make room, possibly queueing discarded samples for chaining.
        self.pending_chain = Vec::new();
        self.slide();
        let chained: Vec<ImuSample> = if self.pending_chain.is_empty() {
            imu.to_vec()
        } else {
            let mut v = std::mem::take(&mut self.pending_chain);
            let seam = v.last().map(|s| s.stamp).unwrap_or(f64::NEG_INFINITY);
            v.extend(imu.iter().copied().filter(|s| s.stamp > seam + STAMP_EPS));
            v
        };

        // Predict the new state from the newest estimate.
        let base = self.window.slots.last().unwrap().state;
        let (preint, predicted) =
            match integrate(&chained, &base.ba, &base.bw, &self.cfg.imu_noise) {
                Ok(pre) => match propagate(&base, &pre, &self.cfg.solver.gravity) {
                    Ok(p) => (Some(pre), p),
                    Err(_) => (None, base),
                },
                Err(_) => (None, base),
            };
        let mut predicted = predicted;
        predicted.stamp = stamp;

        self.window.slots.push(FrameSlot {
            state: predicted,
            is_keyframe: false,
            preint,
            raw_imu: chained,
        });
        let new_idx = self.window.slots.len() - 1;

        // Track bookkeeping.
        for &(id, px) in obs {
            let f = self
                .window
                .features
                .entry(id)
                .or_insert_with(|| Feature::new(id));
            f.obs.push((new_idx, px));
        }
        let tracked: std::collections::BTreeSet<u64> = obs.iter().map(|o| o.0).collect();
        for (&id, f) in self.window.features.iter_mut() {
            if !tracked.contains(&id) {
                f.category = FeatureCategory::Lost;
            } else if f.graduated_at.is_some() || f.obs.len() >= self.cfg.graduation_obs {
                if f.graduated_at.is_none() {
                    f.graduated_at = Some(self.frame_counter);
                }
                f.category = FeatureCategory::Optimized;
            } else {
                f.category = FeatureCategory::New;
            }
        }
        self.triangulate_missing();

        // Keyframe promotion by weighted mean parallax against the most
        // recent keyframe, compensated with the predicted rotation.
        let kf_idx = self.latest_keyframe().unwrap_or(0);
        let kf = &self.window.slots[kf_idx];
        let cam = &self.cfg.solver.camera;
        let rot_cur_prev: Matrix3<f64> = (predicted.q.to_rotation_matrix().into_inner()
            * cam.r_bc)
            .transpose()
            * (kf.state.q.to_rotation_matrix().into_inner() * cam.r_bc);
        let mut weight_sum = 0.0;
        let mut parallax_sum = 0.0;
        let mut common = 0usize;
        for f in self.window.features.values() {
            let Some(px_kf) = f.observation_in(kf_idx) else {
                continue;
            };
            let Some(px_new) = f.observation_in(new_idx) else {
                continue;
            };
            common += 1;
            if let Some(theta) = rotation_compensated_parallax(cam, &rot_cur_prev, px_kf, px_new)
            {
                weight_sum += f.weight;
                parallax_sum += f.weight * theta;
            }
        }
        if common == 0 || weight_sum <= 0.0 {
            self.reset(predicted, obs);
            self.trajectory.push(predicted);
            return FrameReport {
                stamp,
                state: predicted,
                solved: false,
                is_keyframe: true,
                reset: true,
                diverged: false,
            };
        }
        let is_keyframe = parallax_sum / weight_sum > self.cfg.keyframe_parallax;
        self.window.slots[new_idx].is_keyframe = is_keyframe;
        if is_keyframe {
            self.keyframe_count += 1;
        }

        // Solve, once the window spans enough parallax to be worth trusting.
        let keyframes = self
            .window
            .slots
            .iter()
            .filter(|s| s.is_keyframe)
            .count();
        let mut solved = false;
        if self.window.slots.len() >= 2 && keyframes >= MIN_KEYFRAMES_FOR_SOLVE {
            let t0 = Instant::now();
            let report = guarded_solve(
                &mut self.window,
                &self.cfg.solver,
                &self.cfg.guard,
                &self.cfg.imu_noise,
                &predicted,
            );
            self.solve_time_ms += t0.elapsed().as_secs_f64() * 1e3;
            self.solve_counter += 1;
            solved = true;
            if report.first_check_failed {
                self.recovery_count += 1;
            }
            for (round, chk) in report.checks.iter().enumerate() {
                self.traces.bcc.push(BccRow {
                    window: self.solve_counter,
                    anomalous: chk.anomalous,
                    round,
                });
            }
        }

        let newest = self.window.slots.last().unwrap().state;
        let finite = newest.p.iter().all(|x| x.is_finite())
            && newest.v.iter().all(|x| x.is_finite())
            && newest.q.coords.iter().all(|x| x.is_finite());
        if !finite || newest.p.norm() > self.cfg.divergence_radius {
            self.diverged = true;
            return FrameReport {
                stamp,
                state: newest,
                solved,
                is_keyframe,
                reset: false,
                diverged: true,
            };
        }

        self.trajectory.push(newest);
        // Frames still in the window keep improving as later observations
        // arrive; the recorded trajectory carries each frame's latest
        // estimate, not the one it had on arrival.
        if solved {
            for slot in &self.window.slots {
                let stamp = slot.state.stamp;
                if let Ok(idx) = self
                    .trajectory
                    .binary_search_by(|s| s.stamp.partial_cmp(&stamp).unwrap())
                {
                    self.trajectory[idx] = slot.state;
                }
            }
        }
        for f in self.window.features.values() {
            if f.observation_in(new_idx).is_some() {
                self.traces.weights.push(WeightRow {
                    stamp,
                    feature_id: f.id,
                    weight: f.weight,
                });
            }
        }
        self.traces.bias.push(BiasRow {
            stamp,
            ba: newest.ba,
            bw: newest.bw,
        });

        FrameReport {
            stamp,
            state: newest,
            solved,
            is_keyframe,
            reset: false,
            diverged: false,
        }
    }

    /// Gives untriangulated multi-view tracks an initial inverse depth.
    fn triangulate_missing(&mut self) {
        let cam = self.cfg.solver.camera.clone();
        // Under adaptive weighting, fresh tracks are re-triangulated from
        // their endpoints every frame. Their weight is also re-scored from
        // scratch each window, and a depth frozen by an early zero weight
        // (the feature drops out of the bundle) would otherwise never heal.
        let refresh_new = self.cfg.solver.method.uses_atls();
        // While the window is still short of solvable parallax, every depth
        // is provisional; keep all of them pinned to the track endpoints so
        // the first bundle adjustment starts from real baselines.
        let bootstrap = self
            .window
            .slots
            .iter()
            .filter(|s| s.is_keyframe)
            .count()
            < MIN_KEYFRAMES_FOR_SOLVE;
        let states: Vec<BodyState> = self.window.slots.iter().map(|s| s.state).collect();
        for f in self.window.features.values_mut() {
            if f.obs.len() < 2 {
                continue;
            }
            let stale = bootstrap || (refresh_new && f.category == FeatureCategory::New);
            if f.inv_depth.is_some() && !stale {
                continue;
            }
            let (a, apx) = f.obs[0];
            let (b, bpx) = *f.obs.last().unwrap();
            if let Some(d) = triangulate_two_view(&cam, &states[a], &states[b], &apx, &bpx) {
                f.inv_depth = Some(d);
            }
        }
    }
}

/// Runs the estimator over a generated bundle, initialized from the first
/// ground-truth state. Noise floors and the divergence radius are derived
/// from the bundle's scenario; `max_frames` limits the horizon.
pub fn run_on_bundle(
    cfg: EstimatorConfig,
    bundle: &crate::sim::SimBundle,
    max_frames: Option<usize>,
) -> Estimator {
    run_on_bundle_with(cfg, bundle, max_frames, |_, _| {})
}

/// Like [`run_on_bundle`], invoking `observe` with the estimator and the
/// frame report after every processed frame.
pub fn run_on_bundle_with<F>(
    mut cfg: EstimatorConfig,
    bundle: &crate::sim::SimBundle,
    max_frames: Option<usize>,
    mut observe: F,
) -> Estimator
where
    F: FnMut(&Estimator, &FrameReport),
{
    cfg.imu_noise = bundle.scenario.imu_noise.floored();
    cfg.divergence_radius = 10.0 * bundle.scenario.extent();
    // Keep the truncation range above the residual level that detection
    // noise alone produces, or healthy young tracks would be rejected
    // before any long track exists to set the scale.
    cfg.solver.atls.r_hat_floor = cfg
        .solver
        .atls
        .r_hat_floor
        .max(4.0 * bundle.scenario.pixel_noise);
    let mut est = Estimator::new(cfg, bundle.gt[0], &bundle.frames[0].obs);
    let per = (bundle.scenario.imu_rate / bundle.scenario.cam_rate).round() as usize;
    let mut n = bundle.frames.len() - 1;
    if let Some(m) = max_frames {
        n = n.min(m);
    }
    for k in 1..=n {
        let frame = &bundle.frames[k];
        let report =
            est.process_frame(frame.stamp, &frame.obs, &bundle.imu[(k - 1) * per..=k * per]);
        observe(&est, &report);
    }
    est
}
