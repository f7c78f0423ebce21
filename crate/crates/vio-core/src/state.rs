//! Core state containers: per-keyframe body state with its manifold
//! operations, the pinhole camera model, and per-feature bookkeeping.
//!
//! The body-state tangent space is 15-dimensional and ordered
//! `[δp, δθ, δv, δb_a, δb_w]`; rotation updates are applied on the right,
//! `q ⊞ δθ = q ⊗ exp(δθ)`.

use nalgebra::{SVector, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{quat_exp, quat_log};

/// Dimension of one keyframe's tangent space.
pub const STATE_DOF: usize = 15;

/// Tangent-space offsets of the five state blocks.
pub const DP: usize = 0;
pub const DTHETA: usize = 3;
pub const DV: usize = 6;
pub const DBA: usize = 9;
pub const DBW: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("non-finite entries in state update")]
    NonFinite,
}

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
}

/// Pose, velocity, and IMU biases of the body frame at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    /// Time in seconds.
    pub stamp: f64,
    /// Position of the body in the world frame (m).
    pub p: Vector3<f64>,
    /// Orientation, body-to-world.
    pub q: UnitQuaternion<f64>,
    /// Velocity in the world frame (m/s).
    pub v: Vector3<f64>,
    /// Accelerometer bias (m/s^2).
    pub ba: Vector3<f64>,
    /// Gyroscope bias (rad/s).
    pub bw: Vector3<f64>,
}

impl BodyState {
    pub fn new(stamp: f64) -> Self {
        Self {
            stamp,
            p: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            v: Vector3::zeros(),
            ba: Vector3::zeros(),
            bw: Vector3::zeros(),
        }
    }

    /// Manifold retraction: applies a 15-dim tangent increment.
    ///
    /// Rejects non-finite increments so a failed linear solve cannot poison
    /// the state container.
    pub fn boxplus(&self, delta: &SVector<f64, STATE_DOF>) -> Result<Self, StateError> {
        if !delta.iter().all(|x| x.is_finite()) {
            return Err(StateError::NonFinite);
        }
        let dtheta = delta.fixed_rows::<3>(DTHETA).into_owned();
        Ok(Self {
            stamp: self.stamp,
            p: self.p + delta.fixed_rows::<3>(DP),
            q: self.q * quat_exp(&dtheta),
            v: self.v + delta.fixed_rows::<3>(DV),
            ba: self.ba + delta.fixed_rows::<3>(DBA),
            bw: self.bw + delta.fixed_rows::<3>(DBW),
        })
    }

    /// Inverse of [`BodyState::boxplus`]: the tangent taking `other` to `self`.
    pub fn boxminus(&self, other: &Self) -> SVector<f64, STATE_DOF> {
        let mut delta = SVector::<f64, STATE_DOF>::zeros();
        delta.fixed_rows_mut::<3>(DP).copy_from(&(self.p - other.p));
        delta
            .fixed_rows_mut::<3>(DTHETA)
            .copy_from(&quat_log(&(other.q.inverse() * self.q)));
        delta.fixed_rows_mut::<3>(DV).copy_from(&(self.v - other.v));
        delta
            .fixed_rows_mut::<3>(DBA)
            .copy_from(&(self.ba - other.ba));
        delta
            .fixed_rows_mut::<3>(DBW)
            .copy_from(&(self.bw - other.bw));
        delta
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.ba.iter().all(|x| x.is_finite())
            && self.bw.iter().all(|x| x.is_finite())
            && self.q.coords.iter().all(|x| x.is_finite())
    }
}

/// Pinhole camera intrinsics plus the camera-in-body extrinsic transform.
///
/// A point `p_c` in the camera frame sits at `R_bc * p_c + p_bc` in the body
/// frame; the camera looks along its own +z axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera-to-body rotation (columns are the camera axes in body coords).
    pub r_bc: nalgebra::Matrix3<f64>,
    /// Camera origin in the body frame (m).
    pub p_bc: Vector3<f64>,
}

impl CameraModel {
    /// 640x480 pinhole with the camera looking along body +x
    /// (camera z forward, x right, y down).
    pub fn default_vga() -> Self {
        Self {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            r_bc: nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
            p_bc: Vector3::new(0.05, 0.0, 0.0),
        }
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, ProjectionError> {
        if p_cam.z <= 1e-6 {
            return Err(ProjectionError::BehindCamera { z: p_cam.z });
        }
        Ok(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Camera-frame point of pixel `px` at depth `z = depth`.
    pub fn backproject(&self, px: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Unit-depth ray of a pixel (normalized image coordinates).
    pub fn normalized_ray(&self, px: &Vector2<f64>) -> Vector3<f64> {
        self.backproject(px, 1.0)
    }

    pub fn in_bounds(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Track category used by the weighting rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureCategory {
    /// Tracked in the current frame with enough observations to have an
    /// optimized depth.
    Optimized,
    /// Tracked, but not yet observed often enough to graduate.
    New,
    /// No longer tracked in the current frame but still inside the window.
    Lost,
}

/// One feature track inside the sliding window.
///
/// Observations are pixel measurements keyed by window slot index; the first
/// observing slot anchors the inverse-depth parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub id: u64,
    /// `(slot index, pixel)` pairs, ordered by slot.
    pub obs: Vec<(usize, Vector2<f64>)>,
    /// Inverse depth in the anchor camera, if triangulated.
    pub inv_depth: Option<f64>,
    /// Robust weight in [0, 1]; only ever non-increasing for a live track.
    pub weight: f64,
    /// Track category, maintained by the front end every frame.
    pub category: FeatureCategory,
    /// Frame counter at which the track first reached `Optimized`.
    pub graduated_at: Option<u64>,
}

impl Feature {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            obs: Vec::new(),
            inv_depth: None,
            weight: 1.0,
            category: FeatureCategory::New,
            graduated_at: None,
        }
    }

    /// Slot index anchoring the inverse-depth parameterization.
    pub fn anchor_slot(&self) -> Option<usize> {
        self.obs.first().map(|(s, _)| *s)
    }

    pub fn observation_in(&self, slot: usize) -> Option<&Vector2<f64>> {
        self.obs
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, px)| px)
    }
}
