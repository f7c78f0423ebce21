//! Sliding-window bundle adjustment.
//!
//! The window couples up to `n_k` body states with inverse-depth features
//! through IMU preintegration terms, weighted reprojection terms, and an
//! optional marginalization prior. States are optimized by damped
//! Gauss-Newton; inverse depths are eliminated per feature by a Schur
//! complement, so the dense solve only spans the state block. The first
//! slot's pose is held fixed to remove the gauge freedom.
//!
//! Robust estimation alternates between closed-form feature weight updates
//! (adaptive truncation) and state optimization.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::imu::{imu_residual, ImuSample, Preintegration};
use crate::kernel::{
    build_shape, clamp_weight, compute_r_hat_max, new_feature_residual, weight_update,
    AtlsConfig, AtlsShape,
};
use crate::marginal::{factorize, schur_eliminate, MarginalPrior};
use crate::state::{BodyState, CameraModel, Feature, FeatureCategory, STATE_DOF};
use crate::vision::visual_residual;

/// Inverse-depth clamp during optimization (1/m).
pub const LAMBDA_MIN: f64 = 0.0025;
pub const LAMBDA_MAX: f64 = 20.0;

/// Weights at or below this are treated as hard-rejected terms.
pub const WEIGHT_EPS: f64 = 1e-12;

/// Estimation back ends selectable from the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    PlainLs,
    Huber,
    Atls,
    AtlsBcc,
    AtlsBccSsr,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::PlainLs,
        Method::Huber,
        Method::Atls,
        Method::AtlsBcc,
        Method::AtlsBccSsr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::PlainLs => "plain_ls",
            Method::Huber => "huber",
            Method::Atls => "atls",
            Method::AtlsBcc => "atls_bcc",
            Method::AtlsBccSsr => "atls_bcc_ssr",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Adaptive truncated weighting active.
    pub fn uses_atls(&self) -> bool {
        matches!(self, Method::Atls | Method::AtlsBcc | Method::AtlsBccSsr)
    }

    /// Bias consistency checking active.
    pub fn uses_bcc(&self) -> bool {
        matches!(self, Method::AtlsBcc | Method::AtlsBccSsr)
    }

    /// Narrowing recovery rounds active.
    pub fn uses_ssr(&self) -> bool {
        matches!(self, Method::AtlsBccSsr)
    }
}

/// Tuning of the window solver.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: Method,
    pub camera: CameraModel,
    /// Physical gravity vector (points down).
    pub gravity: Vector3<f64>,
    /// Pixel measurement std used for whitening (px).
    pub pixel_sigma: f64,
    /// Transition point of the huber weighting (px).
    pub huber_delta: f64,
    pub atls: AtlsConfig,
    /// Weight-update / optimization rounds per frame.
    pub alternations: usize,
    /// Accepted Gauss-Newton steps per optimization call.
    pub max_inner_iterations: usize,
    pub lambda_init: f64,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            camera: CameraModel::default_vga(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
            pixel_sigma: 1.0,
            huber_delta: 2.0,
            atls: AtlsConfig::default(),
            alternations: 2,
            max_inner_iterations: 10,
            lambda_init: 1e-4,
        }
    }
}

/// One frame held in the window.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSlot {
    pub state: BodyState,
    pub is_keyframe: bool,
    /// Preintegrated IMU from the previous slot to this one.
    pub preint: Option<Preintegration>,
    /// Raw samples covering that interval (for re-integration and chaining).
    pub raw_imu: Vec<ImuSample>,
}

/// Full optimization window: slots, features, and marginalization prior.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Window {
    pub slots: Vec<FrameSlot>,
    pub features: BTreeMap<u64, Feature>,
    pub prior: Option<MarginalPrior>,
}

impl Window {
    pub fn states(&self) -> Vec<BodyState> {
        self.slots.iter().map(|s| s.state).collect()
    }

    pub fn newest(&self) -> Option<&FrameSlot> {
        self.slots.last()
    }
}

/// Column layout of the stacked state tangents.
#[derive(Clone, Copy)]
struct ColMap {
    m: usize,
    fix_first_pose: bool,
}

impl ColMap {
    fn dof(&self) -> usize {
        if self.fix_first_pose {
            self.m * STATE_DOF - 6
        } else {
            self.m * STATE_DOF
        }
    }

    fn col(&self, slot: usize, local: usize) -> Option<usize> {
        if self.fix_first_pose {
            if slot == 0 {
                if local < 6 {
                    None
                } else {
                    Some(local - 6)
                }
            } else {
                Some(9 + (slot - 1) * STATE_DOF + local)
            }
        } else {
            Some(slot * STATE_DOF + local)
        }
    }
}

/// Per-feature Schur data: diagonal, state coupling, gradient.
struct FeatBlock {
    id: u64,
    d: f64,
    c: DVector<f64>,
    g: f64,
}

struct System {
    h: DMatrix<f64>,
    g: DVector<f64>,
    feats: Vec<FeatBlock>,
    cost: f64,
    skipped_obs: usize,
}

/// Features eligible for bundle adjustment, in deterministic id order.
fn ba_features(window: &Window, cfg: &SolverConfig) -> Vec<u64> {
    window
        .features
        .iter()
        .filter(|(_, f)| {
            let valid_depth = f
                .inv_depth
                .map(|l| l.is_finite() && (LAMBDA_MIN..=LAMBDA_MAX).contains(&l))
                .unwrap_or(false);
            let weight_ok = !cfg.method.uses_atls() || f.weight > WEIGHT_EPS;
            valid_depth && f.obs.len() >= 2 && weight_ok
        })
        .map(|(id, _)| *id)
        .collect()
}

/// Robust scaling of one observation term.
fn obs_weight(cfg: &SolverConfig, feature_weight: f64, pixel_residual_norm: f64) -> f64 {
    match cfg.method {
        Method::PlainLs => 1.0,
        Method::Huber => {
            if pixel_residual_norm <= cfg.huber_delta {
                1.0
            } else {
                cfg.huber_delta / pixel_residual_norm
            }
        }
        _ => feature_weight,
    }
}

fn build_system(
    window: &Window,
    cfg: &SolverConfig,
    map: &ColMap,
    ids: &[u64],
    with_matrices: bool,
) -> System {
    let dof = map.dof();
    let mut sys = System {
        h: DMatrix::zeros(if with_matrices { dof } else { 0 }, if with_matrices { dof } else { 0 }),
        g: DVector::zeros(if with_matrices { dof } else { 0 }),
        feats: Vec::new(),
        cost: 0.0,
        skipped_obs: 0,
    };
    let states = window.states();

    // Marginalization prior.
    if let Some(prior) = &window.prior {
        let res = prior.residual(&states);
        sys.cost += 0.5 * res.norm_squared();
        if with_matrices {
            let ht = prior.jacobian.transpose() * &prior.jacobian;
            let gt = prior.jacobian.transpose() * res;
            let p = prior.lin.len();
            for sr in 0..p {
                for lr in 0..STATE_DOF {
                    let Some(cr) = map.col(sr, lr) else { continue };
                    sys.g[cr] += gt[sr * STATE_DOF + lr];
                    for sc in 0..p {
                        for lc in 0..STATE_DOF {
                            let Some(cc) = map.col(sc, lc) else { continue };
                            sys.h[(cr, cc)] += ht[(sr * STATE_DOF + lr, sc * STATE_DOF + lc)];
                        }
                    }
                }
            }
        }
    }

    // IMU terms between consecutive slots.
    for i in 1..window.slots.len() {
        let Some(pre) = &window.slots[i].preint else {
            continue;
        };
        let res = imu_residual(
            pre,
            &window.slots[i - 1].state,
            &window.slots[i].state,
            &cfg.gravity,
            with_matrices,
        );
        let w = pre.sqrt_info();
        let wr = w * res.raw;
        sys.cost += 0.5 * wr.norm_squared();
        if with_matrices {
            let wj = [w * res.j_k.unwrap(), w * res.j_k1.unwrap()];
            let slots = [i - 1, i];
            for (bi, jb) in wj.iter().enumerate() {
                let gt = jb.transpose() * wr;
                for lr in 0..STATE_DOF {
                    if let Some(cr) = map.col(slots[bi], lr) {
                        sys.g[cr] += gt[lr];
                    }
                }
                for (bj, jc) in wj.iter().enumerate() {
                    let ht = jb.transpose() * jc;
                    for lr in 0..STATE_DOF {
                        let Some(cr) = map.col(slots[bi], lr) else { continue };
                        for lc in 0..STATE_DOF {
                            let Some(cc) = map.col(slots[bj], lc) else { continue };
                            sys.h[(cr, cc)] += ht[(lr, lc)];
                        }
                    }
                }
            }
        }
    }

    // Weighted reprojection terms.
    for &id in ids {
        let f = &window.features[&id];
        let lambda = f.inv_depth.unwrap();
        let (a_slot, a_px) = f.obs[0];
        let ray = cfg.camera.normalized_ray(&a_px);
        let mut feat = FeatBlock {
            id,
            d: 0.0,
            c: DVector::zeros(dof),
            g: 0.0,
        };
        let mut touched = false;
        for &(t_slot, t_px) in f.obs.iter().skip(1) {
            let vr = match visual_residual(
                &cfg.camera,
                &window.slots[a_slot].state,
                &window.slots[t_slot].state,
                &ray,
                lambda,
                &t_px,
                with_matrices,
            ) {
                Ok(v) => v,
                Err(_) => {
                    sys.skipped_obs += 1;
                    continue;
                }
            };
            let w = obs_weight(cfg, f.weight, vr.residual.norm());
            if w <= WEIGHT_EPS {
                continue;
            }
            let s = w.sqrt() / cfg.pixel_sigma;
            let sr = vr.residual * s;
            sys.cost += 0.5 * sr.norm_squared();
            if !with_matrices {
                continue;
            }
            touched = true;
            let ja = vr.j_anchor.unwrap() * s;
            let jt = vr.j_target.unwrap() * s;
            let jl = vr.j_lambda.unwrap() * s;
            let blocks = [(a_slot, &ja), (t_slot, &jt)];
            for (bs, jb) in blocks {
                let gt = jb.transpose() * sr;
                let cl = jb.transpose() * jl;
                for lr in 0..6 {
                    let Some(cr) = map.col(bs, lr) else { continue };
                    sys.g[cr] += gt[lr];
                    feat.c[cr] += cl[lr];
                }
                for (cs, jc) in blocks {
                    let ht = jb.transpose() * jc;
                    for lr in 0..6 {
                        let Some(cr) = map.col(bs, lr) else { continue };
                        for lc in 0..6 {
                            let Some(cc) = map.col(cs, lc) else { continue };
                            sys.h[(cr, cc)] += ht[(lr, lc)];
                        }
                    }
                }
            }
            feat.d += jl.dot(&jl);
            feat.g += jl.dot(&sr);
        }
        if touched {
            sys.feats.push(feat);
        }
    }
    sys
}

/// Damped reduced solve. Returns state step and per-feature depth steps.
fn solve_step(sys: &System, lambda: f64) -> Option<(DVector<f64>, Vec<(u64, f64)>)> {
    const PIVOT_FLOOR: f64 = 1e-10;
    let dof = sys.g.len();
    let mut hd = sys.h.clone();
    for i in 0..dof {
        hd[(i, i)] = hd[(i, i)] * (1.0 + lambda) + 1e-12;
    }
    let mut gred = sys.g.clone();
    let mut active: Vec<(&FeatBlock, f64)> = Vec::with_capacity(sys.feats.len());
    for f in &sys.feats {
        let d = f.d * (1.0 + lambda);
        if d <= PIVOT_FLOOR {
            continue;
        }
        // hd -= c cᵀ / d
        for r in 0..dof {
            let cr = f.c[r];
            if cr == 0.0 {
                continue;
            }
            let scale = cr / d;
            for c in 0..dof {
                hd[(r, c)] -= scale * f.c[c];
            }
        }
        gred.axpy(-f.g / d, &f.c, 1.0);
        active.push((f, d));
    }
    let chol = hd.cholesky()?;
    let ds = chol.solve(&(-&gred));
    let mut dl = Vec::with_capacity(active.len());
    for (f, d) in active {
        dl.push((f.id, -(f.g + f.c.dot(&ds)) / d));
    }
    Some((ds, dl))
}

fn apply_step(
    window: &mut Window,
    map: &ColMap,
    ds: &DVector<f64>,
    dl: &[(u64, f64)],
) -> Result<(), crate::state::StateError> {
    let mut new_states = Vec::with_capacity(window.slots.len());
    for (i, slot) in window.slots.iter().enumerate() {
        let mut local = nalgebra::SVector::<f64, STATE_DOF>::zeros();
        for l in 0..STATE_DOF {
            if let Some(c) = map.col(i, l) {
                local[l] = ds[c];
            }
        }
        new_states.push(slot.state.boxplus(&local)?);
    }
    for (slot, st) in window.slots.iter_mut().zip(new_states) {
        slot.state = st;
    }
    for &(id, d) in dl {
        let f = window.features.get_mut(&id).unwrap();
        let l = (f.inv_depth.unwrap() + d).clamp(LAMBDA_MIN, LAMBDA_MAX);
        f.inv_depth = Some(l);
    }
    Ok(())
}

/// Outcome of one damped Gauss-Newton run.
#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub cost_initial: f64,
    pub cost_final: f64,
    pub skipped_obs: usize,
}

/// Optimizes window states and inverse depths at fixed weights.
pub fn optimize_states(window: &mut Window, cfg: &SolverConfig) -> SolveStats {
    let mut stats = SolveStats::default();
    if window.slots.len() < 2 {
        return stats;
    }
    let map = ColMap {
        m: window.slots.len(),
        fix_first_pose: true,
    };
    let ids = ba_features(window, cfg);
    let mut sys = build_system(window, cfg, &map, &ids, true);
    stats.cost_initial = sys.cost;
    stats.cost_final = sys.cost;
    stats.skipped_obs = sys.skipped_obs;
    let mut lambda = cfg.lambda_init;

    // Before the first marginalization every depth and pose is a cold
    // start; allow the extra iterations that take.
    let budget = if window.prior.is_none() {
        cfg.max_inner_iterations * 3
    } else {
        cfg.max_inner_iterations
    };
    let max_attempts = budget * 3;
    for _ in 0..max_attempts {
        if stats.accepted >= budget || lambda > 1e8 {
            break;
        }
        let Some((ds, dl)) = solve_step(&sys, lambda) else {
            lambda *= 10.0;
            stats.rejected += 1;
            continue;
        };
        let saved_states = window.states();
        let saved_lambdas: Vec<(u64, Option<f64>)> = dl
            .iter()
            .map(|&(id, _)| (id, window.features[&id].inv_depth))
            .collect();
        let revert = |w: &mut Window| {
            for (slot, st) in w.slots.iter_mut().zip(&saved_states) {
                slot.state = *st;
            }
            for &(id, l) in &saved_lambdas {
                w.features.get_mut(&id).unwrap().inv_depth = l;
            }
        };
        if apply_step(window, &map, &ds, &dl).is_err() {
            revert(window);
            lambda *= 10.0;
            stats.rejected += 1;
            continue;
        }
        let cand = build_system(window, cfg, &map, &ids, false).cost;
        if cand.is_finite() && cand < sys.cost {
            let rel = (sys.cost - cand) / sys.cost.max(1e-300);
            stats.accepted += 1;
            lambda = (lambda * 0.1).max(1e-9);
            sys = build_system(window, cfg, &map, &ids, true);
            stats.cost_final = sys.cost;
            if rel < 1e-12 || ds.norm() < 1e-10 {
                break;
            }
        } else {
            revert(window);
            lambda *= 10.0;
            stats.rejected += 1;
        }
    }
    stats
}

/// Pixel residual norm of `f` observed in `t_slot`, at current states
/// (`newest_override` substitutes the newest slot's state when given).
/// `None` when the point projects behind the camera or has no depth.
fn obs_residual_norm(
    window: &Window,
    cfg: &SolverConfig,
    f: &Feature,
    t_slot: usize,
    newest_override: Option<&BodyState>,
) -> Option<f64> {
    let lambda = f.inv_depth?;
    let (a_slot, a_px) = f.obs[0];
    if a_slot == t_slot {
        return None;
    }
    let (_, t_px) = *f.obs.iter().find(|o| o.0 == t_slot)?;
    let newest = window.slots.len() - 1;
    let pick = |slot: usize| -> BodyState {
        if slot == newest {
            if let Some(ov) = newest_override {
                return *ov;
            }
        }
        window.slots[slot].state
    };
    let ray = cfg.camera.normalized_ray(&a_px);
    visual_residual(
        &cfg.camera,
        &pick(a_slot),
        &pick(t_slot),
        &ray,
        lambda,
        &t_px,
        false,
    )
    .ok()
    .map(|vr| vr.residual.norm())
}

/// Residuals driving the weight update.
///
/// Long-tracked features are scored by their newest-frame residual; fresh
/// features by their worst residual across the window. Lost features keep
/// their frozen weight and are not scored.
fn weight_residuals(
    window: &Window,
    cfg: &SolverConfig,
    newest_override: Option<&BodyState>,
) -> (Vec<(f64, f64)>, Vec<(u64, f64)>) {
    let newest = window.slots.len() - 1;
    let mut trusted = Vec::new();
    let mut updates = Vec::new();
    for (&id, f) in &window.features {
        if f.inv_depth.is_none() {
            continue;
        }
        match f.category {
            FeatureCategory::Optimized => {
                if !f.obs.iter().any(|o| o.0 == newest) {
                    continue;
                }
                let r = obs_residual_norm(window, cfg, f, newest, newest_override)
                    .unwrap_or(cfg.atls.r_max);
                trusted.push((r, f.weight));
                updates.push((id, r));
            }
            FeatureCategory::New => {
                let rs: Vec<f64> = f
                    .obs
                    .iter()
                    .skip(1)
                    .map(|&(t, _)| {
                        obs_residual_norm(window, cfg, f, t, newest_override)
                            .unwrap_or(cfg.atls.r_max)
                    })
                    .collect();
                if let Some(r) = new_feature_residual(&rs) {
                    updates.push((id, r));
                }
            }
            FeatureCategory::Lost => {}
        }
    }
    (trusted, updates)
}

fn apply_weight_updates(window: &mut Window, updates: &[(u64, f64)], shape: &AtlsShape) {
    for &(id, r) in updates {
        let f = window.features.get_mut(&id).unwrap();
        let fresh = weight_update(shape, r);
        // Long-tracked features can only lose trust. Fresh tracks are
        // re-scored from scratch every window: their early residuals are
        // dominated by bootstrap triangulation error, which heals, while a
        // genuinely moving point keeps scoring near zero.
        f.weight = match f.category {
            FeatureCategory::Optimized => clamp_weight(fresh, f.weight),
            _ => fresh,
        };
    }
}

/// Keyframes required in the window before weights are scored at all.
/// Depths in a window with less parallax are too poorly conditioned to
/// tell a moving point from a mis-triangulated static one, and weights
/// can only ever decrease.
const MIN_KEYFRAMES_FOR_WEIGHTING: usize = 3;

/// One closed-form weight update; returns the truncation shape used.
///
/// When no fully trusted long track exists yet (cold start), the range
/// rests on `r_hat_floor` alone, so the floor should sit above the
/// residual level plain measurement noise produces.
pub fn update_weights(
    window: &mut Window,
    cfg: &SolverConfig,
    newest_override: Option<&BodyState>,
) -> Option<AtlsShape> {
    if !cfg.method.uses_atls() || window.slots.is_empty() {
        return None;
    }
    let keyframes = window.slots.iter().filter(|s| s.is_keyframe).count();
    if keyframes < MIN_KEYFRAMES_FOR_WEIGHTING {
        return None;
    }
    let (trusted, updates) = weight_residuals(window, cfg, newest_override);
    let r_hat = compute_r_hat_max(&trusted, &cfg.atls);
    let shape = build_shape(cfg.atls.r_max, r_hat).ok()?;
    apply_weight_updates(window, &updates, &shape);
    Some(shape)
}

/// Weight refresh under an externally narrowed truncation shape.
pub fn reweight_with_shape(
    window: &mut Window,
    cfg: &SolverConfig,
    shape: &AtlsShape,
    newest_override: Option<&BodyState>,
) {
    if window.slots.is_empty() {
        return;
    }
    let (_, updates) = weight_residuals(window, cfg, newest_override);
    apply_weight_updates(window, &updates, shape);
}

/// Report of one alternation pass.
#[derive(Debug, Clone, Default)]
pub struct AlternateReport {
    pub shapes: Vec<AtlsShape>,
    pub stats: Vec<SolveStats>,
}

/// Alternates weight updates with state optimization.
///
/// In the first round the newest slot is scored at `predicted_newest` (the
/// IMU-propagated state); later rounds use the optimized states.
pub fn alternate(
    window: &mut Window,
    cfg: &SolverConfig,
    predicted_newest: &BodyState,
) -> AlternateReport {
    let mut report = AlternateReport::default();
    if window.slots.len() < 2 {
        return report;
    }
    if !cfg.method.uses_atls() {
        report.stats.push(optimize_states(window, cfg));
        return report;
    }
    for round in 0..cfg.alternations {
        let ov = if round == 0 {
            Some(predicted_newest)
        } else {
            None
        };
        if let Some(shape) = update_weights(window, cfg, ov) {
            report.shapes.push(shape);
        }
        report.stats.push(optimize_states(window, cfg));
    }
    report
}

/// Eliminates the oldest slot and its anchored features into a new prior.
///
/// All terms touching slot 0 — the existing prior, the first IMU link, and
/// the weighted reprojection terms of features anchored there — are
/// linearized at the current states; slot 0 and the anchored inverse depths
/// are then Schur-eliminated and the result refactorized over the remaining
/// slots.
pub fn marginalize_oldest(window: &Window, cfg: &SolverConfig) -> Option<MarginalPrior> {
    let m = window.slots.len();
    if m < 2 {
        return None;
    }
    let sd = m * STATE_DOF;
    let anchored: Vec<u64> = window
        .features
        .iter()
        .filter(|(_, f)| {
            f.obs.first().map(|o| o.0) == Some(0)
                && f.obs.len() >= 2
                && f.inv_depth
                    .map(|l| l.is_finite() && (LAMBDA_MIN..=LAMBDA_MAX).contains(&l))
                    .unwrap_or(false)
                && (!cfg.method.uses_atls() || f.weight > WEIGHT_EPS)
        })
        .map(|(id, _)| *id)
        .collect();
    let total = sd + anchored.len();
    let mut h = DMatrix::<f64>::zeros(total, total);
    let mut g = DVector::<f64>::zeros(total);
    let states = window.states();

    if let Some(prior) = &window.prior {
        let res = prior.residual(&states);
        let d = prior.dim();
        let ht = prior.jacobian.transpose() * &prior.jacobian;
        let gt = prior.jacobian.transpose() * res;
        h.view_mut((0, 0), (d, d)).add_assign(&ht);
        g.rows_mut(0, d).add_assign(&gt);
    }

    if let Some(pre) = &window.slots[1].preint {
        let res = imu_residual(
            pre,
            &window.slots[0].state,
            &window.slots[1].state,
            &cfg.gravity,
            true,
        );
        let w = pre.sqrt_info();
        let wr = w * res.raw;
        let wj = [w * res.j_k.unwrap(), w * res.j_k1.unwrap()];
        for (bi, jb) in wj.iter().enumerate() {
            let gt = jb.transpose() * wr;
            g.rows_mut(bi * STATE_DOF, STATE_DOF).add_assign(&gt);
            for (bj, jc) in wj.iter().enumerate() {
                let ht = jb.transpose() * jc;
                h.view_mut((bi * STATE_DOF, bj * STATE_DOF), (STATE_DOF, STATE_DOF))
                    .add_assign(&ht);
            }
        }
    }

    for (j_idx, &id) in anchored.iter().enumerate() {
        let f = &window.features[&id];
        let lambda = f.inv_depth.unwrap();
        let (a_slot, a_px) = f.obs[0];
        let ray = cfg.camera.normalized_ray(&a_px);
        let lcol = sd + j_idx;
        for &(t_slot, t_px) in f.obs.iter().skip(1) {
            let Ok(vr) = visual_residual(
                &cfg.camera,
                &window.slots[a_slot].state,
                &window.slots[t_slot].state,
                &ray,
                lambda,
                &t_px,
                true,
            ) else {
                continue;
            };
            let w = obs_weight(cfg, f.weight, vr.residual.norm());
            if w <= WEIGHT_EPS {
                continue;
            }
            let s = w.sqrt() / cfg.pixel_sigma;
            let sr = vr.residual * s;
            let ja = vr.j_anchor.unwrap() * s;
            let jt = vr.j_target.unwrap() * s;
            let jl = vr.j_lambda.unwrap() * s;
            let blocks = [(a_slot, &ja), (t_slot, &jt)];
            for (bs, jb) in blocks {
                let gt = jb.transpose() * sr;
                let cl = jb.transpose() * jl;
                for lr in 0..6 {
                    g[bs * STATE_DOF + lr] += gt[lr];
                    h[(bs * STATE_DOF + lr, lcol)] += cl[lr];
                    h[(lcol, bs * STATE_DOF + lr)] += cl[lr];
                }
                for (cs, jc) in blocks {
                    let ht = jb.transpose() * jc;
                    for lr in 0..6 {
                        for lc in 0..6 {
                            h[(bs * STATE_DOF + lr, cs * STATE_DOF + lc)] += ht[(lr, lc)];
                        }
                    }
                }
            }
            h[(lcol, lcol)] += jl.dot(&jl);
            g[lcol] += jl.dot(&sr);
        }
    }

    let keep: Vec<usize> = (STATE_DOF..sd).collect();
    let mut drop: Vec<usize> = (0..STATE_DOF).collect();
    drop.extend(sd..total);
    let (h_red, g_red) = schur_eliminate(&h, &g, &keep, &drop)?;
    let (jacobian, rhs) = factorize(&h_red, &g_red);
    Some(MarginalPrior {
        jacobian,
        rhs,
        lin: states[1..].to_vec(),
    })
}

use std::ops::AddAssign;
