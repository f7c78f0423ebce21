//! Inverse-depth reprojection residuals, two-view triangulation, and
//! rotation-compensated parallax.
//!
//! A feature is parametrized by the inverse of its z-depth in the camera of
//! the first keyframe that observed it (the anchor). Residuals are in raw
//! pixels; robust weighting and measurement whitening are applied by the
//! window solver.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};

use crate::math::skew;
use crate::state::{BodyState, CameraModel, ProjectionError};

/// Valid triangulated depth range along the anchor optical axis (m).
pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 200.0;

/// Minimum sine of the angle between the two triangulating rays.
///
/// 0.02 rad is about 8 px of rotation-compensated displacement on a 400 px
/// focal length: comfortably above what detection noise alone produces, and
/// under one keyframe spacing so healthy tracks triangulate quickly.
pub const MIN_RAY_ANGLE_SIN: f64 = 0.02;

/// Reprojection residual of one observation with optional Jacobians.
#[derive(Debug, Clone)]
pub struct VisualResidual {
    /// Predicted minus observed pixel position.
    pub residual: Vector2<f64>,
    /// d residual / d anchor pose tangent `[δp, δθ]`.
    pub j_anchor: Option<SMatrix<f64, 2, 6>>,
    /// d residual / d target pose tangent `[δp, δθ]`.
    pub j_target: Option<SMatrix<f64, 2, 6>>,
    /// d residual / d inverse depth.
    pub j_lambda: Option<Vector2<f64>>,
}

/// Reprojection of a feature anchored in `anchor` into `target`.
///
/// `ray_anchor` is the normalized image ray (z = 1) of the anchoring
/// observation and `inv_depth` the inverse z-depth along it. Fails when the
/// point lands behind the target camera.
pub fn visual_residual(
    cam: &CameraModel,
    anchor: &BodyState,
    target: &BodyState,
    ray_anchor: &Vector3<f64>,
    inv_depth: f64,
    obs_target: &Vector2<f64>,
    with_jacobians: bool,
) -> Result<VisualResidual, ProjectionError> {
    let r_a = anchor.q.to_rotation_matrix().into_inner();
    let r_t = target.q.to_rotation_matrix().into_inner();
    let r_bc = cam.r_bc;

    let p_ca = ray_anchor / inv_depth;
    let p_body_a = r_bc * p_ca + cam.p_bc;
    let p_w = r_a * p_body_a + anchor.p;
    let p_body_t = r_t.transpose() * (p_w - target.p);
    let p_ct = r_bc.transpose() * (p_body_t - cam.p_bc);

    let predicted = cam.project(&p_ct)?;
    let residual = predicted - obs_target;

    if !with_jacobians {
        return Ok(VisualResidual {
            residual,
            j_anchor: None,
            j_target: None,
            j_lambda: None,
        });
    }

    // d pixel / d point in target camera.
    let z = p_ct.z;
    let d_px = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * p_ct.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * p_ct.y / (z * z),
    );

    let cb_t = r_bc.transpose();
    let to_target_cam = cb_t * r_t.transpose(); // world -> target camera rotation

    let mut j_anchor = SMatrix::<f64, 2, 6>::zeros();
    j_anchor
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_px * to_target_cam));
    j_anchor
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(d_px * (-to_target_cam * r_a * skew(&p_body_a))));

    let mut j_target = SMatrix::<f64, 2, 6>::zeros();
    j_target
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_px * (-to_target_cam)));
    j_target
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(d_px * (cb_t * skew(&p_body_t))));

    let d_pca = -(ray_anchor / (inv_depth * inv_depth));
    let j_lambda = d_px * (to_target_cam * r_a * r_bc * d_pca);

    Ok(VisualResidual {
        residual,
        j_anchor: Some(j_anchor),
        j_target: Some(j_target),
        j_lambda: Some(j_lambda),
    })
}

/// Two-view linear triangulation of the inverse depth in camera `a`.
///
/// Solves for the depth along the `a` ray that best aligns the transported
/// point with the `b` ray (cross-product least squares). Returns `None` for
/// degenerate geometry (no baseline / parallel rays) or depths outside
/// `[MIN_DEPTH, MAX_DEPTH]`.
pub fn triangulate_two_view(
    cam: &CameraModel,
    state_a: &BodyState,
    state_b: &BodyState,
    obs_a: &Vector2<f64>,
    obs_b: &Vector2<f64>,
) -> Option<f64> {
    let ray_a = cam.normalized_ray(obs_a);
    let ray_b = cam.normalized_ray(obs_b);

    let r_wa = state_a.q.to_rotation_matrix().into_inner() * cam.r_bc;
    let t_wa = state_a.q.to_rotation_matrix().into_inner() * cam.p_bc + state_a.p;
    let r_wb = state_b.q.to_rotation_matrix().into_inner() * cam.r_bc;
    let t_wb = state_b.q.to_rotation_matrix().into_inner() * cam.p_bc + state_b.p;

    // cam_b <- cam_a
    let r_ba = r_wb.transpose() * r_wa;
    let t_ba = r_wb.transpose() * (t_wa - t_wb);

    // (R·ray_a × ray_b) d + (t × ray_b) = 0, least squares in d.
    let a = (r_ba * ray_a).cross(&ray_b);
    let b = t_ba.cross(&ray_b);
    let denom = a.dot(&a);
    // Refuse near-parallel rays: below this separation the depth is pure
    // detection noise, and a fabricated depth is worse for the bundle than
    // waiting a few frames for real parallax. The cross product scales with
    // both ray norms (rays are unit-depth, not unit-norm).
    let min_sin2 = MIN_RAY_ANGLE_SIN * MIN_RAY_ANGLE_SIN;
    if denom < min_sin2 * ray_a.norm_squared() * ray_b.norm_squared() {
        return None;
    }
    let depth = -a.dot(&b) / denom;
    if !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
        return None;
    }
    // The transported point must also sit in front of camera b.
    let p_b = r_ba * (ray_a * depth) + t_ba;
    if p_b.z <= MIN_DEPTH * 0.5 {
        return None;
    }
    Some(1.0 / depth)
}

/// Pixel displacement of a feature with the inter-frame rotation removed.
///
/// `rot_cur_prev` maps previous-camera coordinates into the current camera.
/// Returns `None` when the rotated ray does not project (behind the image
/// plane).
pub fn rotation_compensated_parallax(
    cam: &CameraModel,
    rot_cur_prev: &Matrix3<f64>,
    obs_prev: &Vector2<f64>,
    obs_cur: &Vector2<f64>,
) -> Option<f64> {
    let rotated = rot_cur_prev * cam.normalized_ray(obs_prev);
    let compensated = cam.project(&rotated).ok()?;
    Some((obs_cur - compensated).norm())
}
