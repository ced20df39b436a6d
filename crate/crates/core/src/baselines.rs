//! Comparison estimators: the spectrum Lasso (nuclear penalty only, no
//! calibration) and the modified estimator that replaces the observed
//! quadratic term by its expectation `pi0 ||M||_F^2`.

use crate::matcore::{DenseMatrix, MatError};
use crate::obsmodel::ObservationSet;
use crate::shrinkage;
use crate::solver::{em_solve, SolverConfig, SolverError, SolverResult};

/// The spectrum Lasso: the penalized least-squares solution with
/// `lambda2 = 0` and no calibration (`xi = 1`, so `theta_hat = z_final`).
pub fn spectrum_lasso(
    obs: &ObservationSet,
    lambda1: f64,
    cfg: &SolverConfig,
) -> Result<SolverResult, SolverError> {
    let mut c = cfg.clone();
    c.lambda1 = lambda1;
    c.lambda2 = 0.0;
    em_solve(obs, &c)
}

/// The modified estimator with the expected quadratic term: the minimizer
/// of `(pi0/2) ||M||_F^2 - <Y_raw, M> + lambda1 ||M||_N`.
///
/// Completing the square turns the objective into
/// `pi0 [ ||M - Y_raw/pi0||_F^2 / 2 + (lambda1/pi0) ||M||_N ]` plus a
/// constant, so the minimizer is the soft-thresholding SVD
/// `shrink(Y_raw/pi0; lambda1/pi0, 0)`; its singular values are
/// `(s_i(Y_raw) - lambda1)_+ / pi0`.
pub fn klt_estimator(obs: &ObservationSet, lambda1: f64) -> Result<DenseMatrix, MatError> {
    let pi0 = obs.pi0();
    let target = obs.raw_sum_matrix().scale(1.0 / pi0);
    shrinkage::shrink(&target, lambda1 / pi0, 0.0)
}
