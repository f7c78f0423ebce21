//! Small rotation / quaternion helpers shared by the integrator, the solver,
//! and the simulator.
//!
//! Conventions:
//! - rotation vectors ("scaled axis") map to quaternions through [`quat_exp`];
//! - all quaternions are Hamilton, stored as `nalgebra::UnitQuaternion`
//!   (scalar part `w`, vector part `xyz`);
//! - 4-vectors used with the product matrices are ordered `[w, x, y, z]`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};

/// Angle (rad) below which trigonometric forms fall back to series
/// expansions to stay accurate near zero.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric (cross-product) matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map: rotation vector -> unit quaternion.
pub fn quat_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = phi.norm();
    let (w, k) = if angle < SMALL_ANGLE {
        // sin(a/2)/a = 1/2 - a^2/48 + O(a^4); cos(a/2) = 1 - a^2/8 + O(a^4)
        (1.0 - angle * angle / 8.0, 0.5 - angle * angle / 48.0)
    } else {
        ((0.5 * angle).cos(), (0.5 * angle).sin() / angle)
    };
    UnitQuaternion::new_normalize(Quaternion::from_parts(w, phi * k))
}

/// Logarithm map: unit quaternion -> rotation vector (angle in [0, pi]).
pub fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    // Work on the representative with non-negative scalar part so the
    // returned rotation is the short way round.
    let (w, v) = if q.w >= 0.0 {
        (q.w, q.imag())
    } else {
        (-q.w, -q.imag())
    };
    let n = v.norm();
    if n < SMALL_ANGLE {
        // atan2(n, w)/n = 1/w - n^2/(3 w^3) + O(n^4), times 2.
        v * (2.0 / w)
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

/// Left-multiplication matrix: `quat_mul_vec4(&qleft(p), q) == p ⊗ q`.
pub fn qleft(p: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let w = p.w;
    let v = p.imag();
    let mut m = Matrix4::zeros();
    m[(0, 0)] = w;
    m.fixed_view_mut::<1, 3>(0, 1).copy_from(&(-v.transpose()));
    m.fixed_view_mut::<3, 1>(1, 0).copy_from(&v);
    m.fixed_view_mut::<3, 3>(1, 1)
        .copy_from(&(Matrix3::identity() * w + skew(&v)));
    m
}

/// Right-multiplication matrix: `quat_mul_vec4(&qright(q), p) == p ⊗ q`.
pub fn qright(q: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let w = q.w;
    let v = q.imag();
    let mut m = Matrix4::zeros();
    m[(0, 0)] = w;
    m.fixed_view_mut::<1, 3>(0, 1).copy_from(&(-v.transpose()));
    m.fixed_view_mut::<3, 1>(1, 0).copy_from(&v);
    m.fixed_view_mut::<3, 3>(1, 1)
        .copy_from(&(Matrix3::identity() * w - skew(&v)));
    m
}

/// `[w, x, y, z]` coordinates of a unit quaternion.
pub fn quat_vec4(q: &UnitQuaternion<f64>) -> Vector4<f64> {
    Vector4::new(q.w, q.i, q.j, q.k)
}
