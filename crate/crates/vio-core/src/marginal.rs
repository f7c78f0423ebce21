//! Gaussian prior from marginalized window slots.
//!
//! When the oldest keyframe leaves the window, its IMU link, the weighted
//! reprojection terms of features anchored in it, and the existing prior are
//! linearized at the current states; the slot's pose/velocity/bias block and
//! the anchored inverse depths are then eliminated by a Schur complement.
//! The reduced quadratic is re-factorized through an eigendecomposition into
//! a square-root form `½‖J Δx − r‖²` over the remaining prefix of slots.

use nalgebra::{DMatrix, DVector};

use crate::state::{BodyState, STATE_DOF};

/// Square-root prior over the first `lin.len()` window slots.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior {
    /// Constant Jacobian w.r.t. the stacked slot tangents.
    pub jacobian: DMatrix<f64>,
    /// Constant offset: the residual is `J·(x ⊟ lin) − rhs`.
    pub rhs: DVector<f64>,
    /// Linearization states of the covered slots.
    pub lin: Vec<BodyState>,
}

impl MarginalPrior {
    pub fn dim(&self) -> usize {
        self.lin.len() * STATE_DOF
    }

    /// Stacked tangent offset of the covered slots from the linearization
    /// states.
    pub fn delta(&self, states: &[BodyState]) -> DVector<f64> {
        let mut dx = DVector::zeros(self.dim());
        for (i, lin) in self.lin.iter().enumerate() {
            let d = states[i].boxminus(lin);
            dx.rows_mut(i * STATE_DOF, STATE_DOF).copy_from(&d);
        }
        dx
    }

    /// Residual at the given states (first `lin.len()` entries are used).
    pub fn residual(&self, states: &[BodyState]) -> DVector<f64> {
        &self.jacobian * self.delta(states) - &self.rhs
    }
}

/// Schur complement onto `keep` after eliminating `drop`.
///
/// `h`/`g` are the quadratic's Hessian and gradient (cost ≈ ½ΔᵀHΔ + gᵀΔ).
/// Returns the reduced (H', g'). The eliminated block is regularized with
/// escalating jitter if it is not positive definite.
pub(crate) fn schur_eliminate(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    keep: &[usize],
    drop: &[usize],
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let hkk = h.select_rows(keep.iter()).select_columns(keep.iter());
    let hkd = h.select_rows(keep.iter()).select_columns(drop.iter());
    let hdd = h.select_rows(drop.iter()).select_columns(drop.iter());
    let gk = g.select_rows(keep.iter());
    let gd = g.select_rows(drop.iter());

    let mut jitter = 0.0f64;
    let chol = loop {
        let m = &hdd + DMatrix::identity(drop.len(), drop.len()) * jitter;
        match m.cholesky() {
            Some(c) => break c,
            None => {
                jitter = if jitter == 0.0 { 1e-8 } else { jitter * 10.0 };
                if jitter > 1e-2 {
                    return None;
                }
                log::warn!("eliminated block not positive definite; jitter {jitter:.1e}");
            }
        }
    };
    let x = chol.solve(&hkd.transpose()); // Hdd⁻¹ Hdk
    let h_red = &hkk - &hkd * &x;
    let g_red = &gk - &hkd * chol.solve(&gd);
    Some(((&h_red + h_red.transpose()) * 0.5, g_red))
}

/// Square-root refactorization of a reduced quadratic.
///
/// Eigenvalues at or below the floor are discarded, so the returned factor
/// has full row rank: `J = S^{1/2} Vᵀ`, `rhs = −S^{-1/2} Vᵀ g`.
pub(crate) fn factorize(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    const EIG_FLOOR: f64 = 1e-10;
    let n = h.nrows();
    let eig = h.clone().symmetric_eigen();
    let kept: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > EIG_FLOOR).collect();
    let mut jac = DMatrix::zeros(kept.len(), n);
    let mut rhs = DVector::zeros(kept.len());
    for (row, &i) in kept.iter().enumerate() {
        let s = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        let sq = s.sqrt();
        for c in 0..n {
            jac[(row, c)] = sq * v[c];
        }
        rhs[row] = -v.dot(g) / sq;
    }
    (jac, rhs)
}

/// Drops one slot's block from a prior, marginalizing it at the prior's own
/// linearization point. Slots above the dropped index shift down by one.
pub fn drop_slot_from_prior(prior: &MarginalPrior, slot: usize) -> MarginalPrior {
    if slot >= prior.lin.len() {
        return prior.clone();
    }
    let n = prior.dim();
    let h = prior.jacobian.transpose() * &prior.jacobian;
    let g = -(prior.jacobian.transpose() * &prior.rhs);
    let drop: Vec<usize> = (slot * STATE_DOF..(slot + 1) * STATE_DOF).collect();
    let keep: Vec<usize> = (0..n).filter(|i| !drop.contains(i)).collect();
    let Some((h_red, g_red)) = schur_eliminate(&h, &g, &keep, &drop) else {
        // Degenerate block: fall back to simply deleting its rows/columns.
        let jac = prior.jacobian.select_columns(keep.iter());
        let mut lin = prior.lin.clone();
        lin.remove(slot);
        return MarginalPrior {
            jacobian: jac,
            rhs: prior.rhs.clone(),
            lin,
        };
    };
    let (jacobian, rhs) = factorize(&h_red, &g_red);
    let mut lin = prior.lin.clone();
    lin.remove(slot);
    MarginalPrior { jacobian, rhs, lin }
}
