//! Trajectory accuracy metrics.
//!
//! Absolute error is computed after a closed-form rigid alignment of the
//! estimate onto the ground truth; relative error is computed over fixed
//! ground-truth arc-length segments in the local body frame, which makes it
//! invariant to any global rigid transform of the estimate.

use nalgebra::{Matrix3, Vector3};

use crate::state::BodyState;

/// Max stamp gap for associating estimate and ground-truth states (s).
pub const STAMP_MATCH_TOL: f64 = 0.010;

/// Arc length of one relative-error segment (m).
pub const RTE_SEGMENT_LEN: f64 = 0.2;

/// Best rigid transform (R, t) minimizing Σ‖R a_i + t - b_i‖² (no scale).
pub fn align_rigid(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    if a.len() != b.len() || a.len() < 3 {
        return None;
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (pa, pb) in a.iter().zip(b) {
        h += (pa - ca) * (pb - cb).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut d = Matrix3::identity();
    d[(2, 2)] = (v_t.transpose() * u.transpose()).determinant().signum();
    let r = v_t.transpose() * d * u.transpose();
    let t = cb - r * ca;
    Some((r, t))
}

/// Pairs of indices `(est, gt)` whose stamps differ by at most the
/// association tolerance, each ground-truth state used at most once.
fn match_stamps(est: &[BodyState], gt: &[BodyState]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, e) in est.iter().enumerate() {
        while j + 1 < gt.len()
            && (gt[j + 1].stamp - e.stamp).abs() <= (gt[j].stamp - e.stamp).abs()
        {
            j += 1;
        }
        if j < gt.len() && (gt[j].stamp - e.stamp).abs() <= STAMP_MATCH_TOL {
            pairs.push((i, j));
            j += 1;
        }
        if j >= gt.len() {
            break;
        }
    }
    pairs
}

/// Absolute trajectory error: RMSE of matched positions after rigid
/// alignment. `None` when fewer than three pairs match.
pub fn ate_rmse(est: &[BodyState], gt: &[BodyState]) -> Option<f64> {
    let pairs = match_stamps(est, gt);
    if pairs.len() < 3 {
        return None;
    }
    let pa: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].p).collect();
    let pb: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt[j].p).collect();
    let (r, t) = align_rigid(&pa, &pb)?;
    let sse: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(a, b)| ((r * a + t) - b).norm_squared())
        .sum();
    Some((sse / pa.len() as f64).sqrt())
}

/// Relative trajectory error: RMSE of body-frame displacement errors over
/// consecutive ground-truth segments of [`RTE_SEGMENT_LEN`] arc length.
/// `None` when no full segment exists.
pub fn rte_rmse(est: &[BodyState], gt: &[BodyState]) -> Option<f64> {
    let pairs = match_stamps(est, gt);
    if pairs.len() < 2 {
        return None;
    }
    let mut errors = Vec::new();
    let mut seg_start = 0usize; // index into pairs
    let mut arc = 0.0;
    for w in 1..pairs.len() {
        arc += (gt[pairs[w].1].p - gt[pairs[w - 1].1].p).norm();
        // Small slack keeps accumulated rounding from pushing a segment
        // boundary one sample late.
        if arc >= RTE_SEGMENT_LEN - 1e-9 {
            let (e0, g0) = pairs[seg_start];
            let (e1, g1) = pairs[w];
            let rg = gt[g0].q.to_rotation_matrix().into_inner();
            let re = est[e0].q.to_rotation_matrix().into_inner();
            let d_gt = rg.transpose() * (gt[g1].p - gt[g0].p);
            let d_est = re.transpose() * (est[e1].p - est[e0].p);
            errors.push((d_est - d_gt).norm_squared());
            seg_start = w;
            arc = 0.0;
        }
    }
    if errors.is_empty() {
        return None;
    }
    Some((errors.iter().sum::<f64>() / errors.len() as f64).sqrt())
}
