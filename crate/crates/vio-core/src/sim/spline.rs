//! Smooth analytic trajectories for the scenario generator.
//!
//! Positions follow a natural cubic spline (C², analytic acceleration);
//! orientations interpolate between knots with a quintic smoothstep along a
//! fixed rotation axis, which gives a continuous body rate that vanishes at
//! the knots.

use nalgebra::{UnitQuaternion, Vector3};

use crate::math::{quat_exp, quat_log};

/// Natural cubic spline through position knots at given times.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    ts: Vec<f64>,
    vals: Vec<Vector3<f64>>,
    second: Vec<Vector3<f64>>,
}

impl CubicSpline {
    /// Builds the spline; requires at least two strictly increasing knots.
    pub fn new(ts: Vec<f64>, vals: Vec<Vector3<f64>>) -> Self {
        assert!(ts.len() >= 2, "need at least two knots");
        assert_eq!(ts.len(), vals.len(), "knot time/value count mismatch");
        assert!(
            ts.windows(2).all(|w| w[1] > w[0]),
            "knot times must increase strictly"
        );
        let n = ts.len();
        let mut second = vec![Vector3::zeros(); n];
        if n > 2 {
            // Thomas algorithm on the tridiagonal natural-spline system.
            let m = n - 2;
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut lower = vec![0.0; m];
            let mut rhs = vec![Vector3::zeros(); m];
            for i in 0..m {
                let h0 = ts[i + 1] - ts[i];
                let h1 = ts[i + 2] - ts[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                lower[i] = h0;
                upper[i] = h1;
                rhs[i] = ((vals[i + 2] - vals[i + 1]) / h1 - (vals[i + 1] - vals[i]) / h0) * 6.0;
            }
            for i in 1..m {
                let w = lower[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] = rhs[i] - rhs[i - 1] * w;
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                second[i + 1] = (rhs[i] - second[i + 2] * upper[i]) / diag[i];
            }
        }
        Self { ts, vals, second }
    }

    fn segment(&self, t: f64) -> usize {
        match self.ts.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.ts.len() - 2),
            Err(i) => i.clamp(1, self.ts.len() - 1) - 1,
        }
    }

    /// Position, velocity, acceleration at `t` (clamped to the knot span).
    pub fn eval(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let t = t.clamp(self.ts[0], *self.ts.last().unwrap());
        let i = self.segment(t);
        let (t0, t1) = (self.ts[i], self.ts[i + 1]);
        let h = t1 - t0;
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let (p0, p1) = (self.vals[i], self.vals[i + 1]);
        let a = t1 - t;
        let b = t - t0;
        let c0 = p0 / h - m0 * (h / 6.0);
        let c1 = p1 / h - m1 * (h / 6.0);
        let pos = m0 * (a * a * a / (6.0 * h)) + m1 * (b * b * b / (6.0 * h)) + c0 * a + c1 * b;
        let vel = -m0 * (a * a / (2.0 * h)) + m1 * (b * b / (2.0 * h)) - c0 + c1;
        let acc = m0 * (a / h) + m1 * (b / h);
        (pos, vel, acc)
    }

    pub fn start(&self) -> f64 {
        self.ts[0]
    }

    pub fn end(&self) -> f64 {
        *self.ts.last().unwrap()
    }
}

/// Orientation track with smoothstep interpolation between quaternion knots.
#[derive(Debug, Clone)]
pub struct OrientationTrack {
    ts: Vec<f64>,
    qs: Vec<UnitQuaternion<f64>>,
    /// Per-segment rotation vectors `log(q_i⁻¹ q_{i+1})`.
    phis: Vec<Vector3<f64>>,
}

impl OrientationTrack {
    pub fn new(ts: Vec<f64>, qs: Vec<UnitQuaternion<f64>>) -> Self {
        assert!(ts.len() >= 2, "need at least two knots");
        assert_eq!(ts.len(), qs.len(), "knot time/value count mismatch");
        assert!(
            ts.windows(2).all(|w| w[1] > w[0]),
            "knot times must increase strictly"
        );
        let phis = qs
            .windows(2)
            .map(|w| quat_log(&(w[0].inverse() * w[1])))
            .collect();
        Self { ts, qs, phis }
    }

    fn segment(&self, t: f64) -> usize {
        match self.ts.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.ts.len() - 2),
            Err(i) => i.clamp(1, self.ts.len() - 1) - 1,
        }
    }

    /// Orientation and body angular rate at `t` (clamped to the knot span).
    pub fn eval(&self, t: f64) -> (UnitQuaternion<f64>, Vector3<f64>) {
        let t = t.clamp(self.ts[0], *self.ts.last().unwrap());
        let i = self.segment(t);
        let h = self.ts[i + 1] - self.ts[i];
        let u = (t - self.ts[i]) / h;
        let s = u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
        let ds = 30.0 * u * u * (1.0 - u) * (1.0 - u) / h;
        let phi = self.phis[i];
        let q = self.qs[i] * quat_exp(&(phi * s));
        // Fixed-axis segment: the body rate is the axis scaled by ds/dt.
        (q, phi * ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn demo_spline() -> CubicSpline {
        let ts = vec![0.0, 1.0, 2.5, 4.0, 5.0];
        let vals = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.5, 0.1),
            Vector3::new(2.0, -0.5, 0.3),
            Vector3::new(3.0, 0.5, 0.0),
            Vector3::new(4.0, 0.0, -0.2),
        ];
        CubicSpline::new(ts, vals)
    }

    #[test]
    fn interpolates_knots() {
        let s = demo_spline();
        for (t, v) in [(0.0, Vector3::zeros()), (2.5, Vector3::new(2.0, -0.5, 0.3))] {
            let (p, _, _) = s.eval(t);
            assert_relative_eq!(p, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let s = demo_spline();
        let h = 1e-6;
        for &t in &[0.3, 0.99, 1.01, 2.0, 3.7, 4.6] {
            let (_, v, a) = s.eval(t);
            let (pp, vp, _) = s.eval(t + h);
            let (pm, vm, _) = s.eval(t - h);
            assert_relative_eq!(v, (pp - pm) / (2.0 * h), epsilon = 1e-6);
            assert_relative_eq!(a, (vp - vm) / (2.0 * h), epsilon = 1e-5);
        }
    }

    #[test]
    fn acceleration_is_continuous_at_knots() {
        let s = demo_spline();
        for &t in &[1.0, 2.5, 4.0] {
            let (_, _, am) = s.eval(t - 1e-9);
            let (_, _, ap) = s.eval(t + 1e-9);
            assert_relative_eq!(am, ap, epsilon = 1e-6);
        }
    }

    #[test]
    fn natural_ends_have_zero_curvature() {
        let s = demo_spline();
        let (_, _, a0) = s.eval(0.0);
        let (_, _, a1) = s.eval(5.0);
        assert_relative_eq!(a0, Vector3::zeros(), epsilon = 1e-12);
        assert_relative_eq!(a1, Vector3::zeros(), epsilon = 1e-12);
    }

    fn demo_track() -> OrientationTrack {
        let ts = vec![0.0, 2.0, 4.0];
        let qs = vec![
            UnitQuaternion::identity(),
            quat_exp(&Vector3::new(0.2, -0.1, 0.5)),
            quat_exp(&Vector3::new(-0.1, 0.3, 0.8)),
        ];
        OrientationTrack::new(ts, qs)
    }

    #[test]
    fn orientation_interpolates_knots_with_zero_rate() {
        let tr = demo_track();
        let (q, w) = tr.eval(2.0);
        assert!(q.angle_to(&quat_exp(&Vector3::new(0.2, -0.1, 0.5))) < 1e-12);
        assert!(w.norm() < 1e-9);
    }

    /// The reported body rate must satisfy q(t+h) ≈ q(t) ⊗ exp(ω h).
    #[test]
    fn body_rate_matches_quaternion_difference() {
        let tr = demo_track();
        let h = 1e-6;
        for &t in &[0.4, 1.3, 1.999, 2.001, 3.5] {
            let (q, w) = tr.eval(t);
            let (qp, _) = tr.eval(t + h);
            let fd = quat_log(&(q.inverse() * qp)) / h;
            assert_relative_eq!(w, fd, epsilon = 1e-5);
        }
    }
}
