//! The EM iteration for the penalized least-squares completion problem,
//! the bias-calibration step, and closed-form penalty selection.
//!
//! Each iteration imputes a complete matrix from the observed sample means
//! and the previous iterate (E-step), then applies the scaled
//! soft-thresholding SVD with penalties divided by the complete-data
//! multiplicity `m_*` (M-step), until the relative change
//! `||Z_k - Z_{k-1}||_F^2 / ||Z_k||_F^2` drops to `epsilon`. The limit is
//! the penalized least-squares minimizer whenever `m_* >= m*` (the maximum
//! observed multiplicity); for `m_* < m*` the iteration still converges and
//! is useful as a warm-up stage, but the limit's identity carries no
//! guarantee, so [`two_stage_solve`] chains a warm-up run into a final run
//! at `m_* = m*`. A final calibration multiplies by `xi = 1 + lambda2/pi0`
//! to undo the Frobenius-penalty shrinkage.

use std::str::FromStr;

use thiserror::Error;

use crate::matcore::{self, DenseMatrix, MatError};
use crate::obsmodel::{self, ObservationSet};
use crate::shrinkage::{self, PenaltyPair};

/// Relative singular-value cutoff used when counting ranks. Prox outputs
/// have exact zeros, so this only guards floating-point dust.
pub const RANK_REL_TOL: f64 = 1e-8;

/// Default relative convergence tolerance for the EM stopping rule.
pub const DEFAULT_EPSILON: f64 = 1e-9;

/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 500;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("penalty selection needs d1 + d2 >= 3, got {0}")]
    DimensionTooSmall(usize),
    #[error("rank tolerance {0} not in (0, 1)")]
    InvalidRankTol(f64),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("KKT residual undefined for lambda1 = 0")]
    ZeroLambda1,
}

/// Initialization for the EM iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverInit {
    /// Start from the matrix of observed sample means (zeros elsewhere).
    YbarObs,
    /// Start from a caller-provided matrix, e.g. a previous solution.
    Warm(DenseMatrix),
}

/// EM solver configuration.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Complete-data multiplicity `m_*`. The minimizer guarantee needs
    /// `m_* >= m*`; smaller values are allowed as a warm-up stage.
    pub m_star: u32,
    /// Relative convergence tolerance for the stopping rule.
    pub epsilon: f64,
    pub max_iter: usize,
    pub init: SolverInit,
}

impl SolverConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            m_star: 1,
            epsilon: DEFAULT_EPSILON,
            max_iter: DEFAULT_MAX_ITER,
            init: SolverInit::YbarObs,
        }
    }

    pub fn with_m_star(mut self, m_star: u32) -> Self {
        self.m_star = m_star;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_init(mut self, init: SolverInit) -> Self {
        self.init = init;
        self
    }

    fn validate(&self) -> Result<(), SolverError> {
        if !(self.lambda1 >= 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "lambda1 must be nonnegative, got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2 >= 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "lambda2 must be nonnegative, got {}",
                self.lambda2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iter < 1 {
            return Err(SolverError::InvalidConfig(
                "max_iter must be at least 1".to_string(),
            ));
        }
        if self.m_star < 1 {
            return Err(SolverError::InvalidConfig(
                "m_star must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

impl FromStr for SolverConfig {
    type Err = SolverError;

    /// Parses `key=value` lines: `lambda1`, `lambda2`, `m_star`, `epsilon`,
    /// `max_iter`. Missing keys keep their defaults; the initializer is not
    /// part of the text format.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut cfg = SolverConfig::new(0.0, 0.0);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SolverError::InvalidConfig(format!("line {}: expected key=value", lineno + 1))
            })?;
            let value = value.trim();
            let err = |e: String| {
                SolverError::InvalidConfig(format!("line {}: {e}", lineno + 1))
            };
            match key.trim() {
                "lambda1" => cfg.lambda1 = value.parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
                "lambda2" => cfg.lambda2 = value.parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
                "m_star" => cfg.m_star = value.parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                "epsilon" => cfg.epsilon = value.parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
                "max_iter" => cfg.max_iter = value.parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome of an EM run.
#[derive(Debug, Clone)]
pub struct SolverResult {
    /// The penalized least-squares solution (uncalibrated).
    pub z_final: DenseMatrix,
    /// The calibrated estimate `xi * z_final`, `xi = 1 + lambda2 / pi0`.
    pub theta_hat: DenseMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each M-step.
    pub objective_trace: Vec<f64>,
    /// Rank of `z_final` at the [`RANK_REL_TOL`] cutoff.
    pub est_rank: usize,
}

/// The generalized E-step: entrywise
/// `min{1, m_omega/m_*} * ybar_omega + (1 - m_omega/m_*)_+ * z_old_omega`.
/// Unobserved entries keep `z_old`.
pub fn impute(obs: &ObservationSet, z_old: &DenseMatrix, m_star: u32) -> DenseMatrix {
    assert_eq!(
        z_old.shape(),
        (obs.d1(), obs.d2()),
        "imputation shape mismatch"
    );
    assert!(m_star >= 1, "m_star must be at least 1");
    let ybar = obsmodel::ybar_obs(obs);
    impute_from_parts(obs, &ybar, z_old, m_star)
}

/// Imputation with a precomputed `ybar`; the solver loop calls this to
/// avoid re-averaging every iteration.
fn impute_from_parts(
    obs: &ObservationSet,
    ybar: &DenseMatrix,
    z_old: &DenseMatrix,
    m_star: u32,
) -> DenseMatrix {
    let ms = m_star as f64;
    DenseMatrix::from_fn(obs.d1(), obs.d2(), |i, j| {
        let m = obs.multiplicity(i, j) as f64;
        if m == 0.0 {
            z_old.get(i, j)
        } else {
            let w_obs = (m / ms).min(1.0);
            let w_old = (1.0 - m / ms).max(0.0);
            w_obs * ybar.get(i, j) + w_old * z_old.get(i, j)
        }
    })
}

/// Runs the EM iteration and returns the calibrated result.
///
/// The stopping rule is `||Z_k - Z_{k-1}||_F^2 / ||Z_k||_F^2 <= epsilon`;
/// exhausting `max_iter` is reported through `converged = false`, never as
/// a hard failure.
pub fn em_solve(obs: &ObservationSet, cfg: &SolverConfig) -> Result<SolverResult, SolverError> {
    cfg.validate()?;
    let ybar = obsmodel::ybar_obs(obs);
    let mut z = match &cfg.init {
        SolverInit::YbarObs => ybar.clone(),
        SolverInit::Warm(m) => {
            if m.shape() != (obs.d1(), obs.d2()) {
                return Err(SolverError::Mat(MatError::ShapeMismatch {
                    lhs_rows: m.rows(),
                    lhs_cols: m.cols(),
                    rhs_rows: obs.d1(),
                    rhs_cols: obs.d2(),
                }));
            }
            m.clone()
        }
    };

    let ms = cfg.m_star as f64;
    let (l1_step, l2_step) = (cfg.lambda1 / ms, cfg.lambda2 / ms);

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut spectrum: Vec<f64> = Vec::new();

    for k in 1..=cfg.max_iter {
        let imputed = impute_from_parts(obs, &ybar, &z, cfg.m_star);
        let (z_new, s) = shrinkage::shrink_with_spectrum(&imputed, l1_step, l2_step)?;
        iterations = k;

        trace.push(objective_from_spectrum(obs, &z_new, &s, cfg));
        let diff_sq = z_new.sub(&z).frobenius_norm_sq();
        let norm_sq = z_new.frobenius_norm_sq();
        z = z_new;
        spectrum = s;

        let rel = if norm_sq > 0.0 {
            diff_sq / norm_sq
        } else if diff_sq == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if rel <= cfg.epsilon {
            converged = true;
            break;
        }
    }

    let xi = 1.0 + cfg.lambda2 / obs.pi0();
    let theta_hat = z.scale(xi);
    let est_rank = rank_from_spectrum(&spectrum, RANK_REL_TOL);

    Ok(SolverResult {
        z_final: z,
        theta_hat,
        iterations,
        converged,
        objective_trace: trace,
        est_rank,
    })
}

/// Evaluates the penalized objective using the spectrum produced by the
/// M-step, so no extra factorization is needed for the trace.
fn objective_from_spectrum(
    obs: &ObservationSet,
    z: &DenseMatrix,
    spectrum: &[f64],
    cfg: &SolverConfig,
) -> f64 {
    let mut quad = 0.0;
    for &(i, j, y) in obs.samples() {
        let v = z.get(i, j);
        quad += 0.5 * v * v - y * v;
    }
    let nuclear: f64 = spectrum.iter().sum();
    quad + cfg.lambda1 * nuclear + 0.5 * cfg.lambda2 * z.frobenius_norm_sq()
}

fn rank_from_spectrum(spectrum: &[f64], rel_tol: f64) -> usize {
    let top = spectrum.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    spectrum.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Warm-started two-stage solve for tied observations: a first run with
/// `m_* = 1` (every observed entry treated as complete) initializes a
/// second run at `m_* = m*`. Degenerates to a single run when `m* <= 1`.
pub fn two_stage_solve(
    obs: &ObservationSet,
    cfg: &SolverConfig,
) -> Result<SolverResult, SolverError> {
    let m_star_max = obs.m_star_max();
    if m_star_max <= 1 {
        let stage = cfg.clone().with_m_star(1);
        return em_solve(obs, &stage);
    }
    let warmup = cfg.clone().with_m_star(1);
    let first = em_solve(obs, &warmup)?;
    let main = cfg
        .clone()
        .with_m_star(m_star_max)
        .with_init(SolverInit::Warm(first.z_final));
    em_solve(obs, &main)
}

/// Closed-form penalty selection:
/// `lambda1 = sigma * sqrt(8 pi0 d log d)` with `d = d1 + d2` and natural
/// log, and `lambda2 = lambda1 * {n/(d log d)}^{1/4} / F_hat` with
/// `F_hat = (sum_i y_i^2 / pi0)^{1/2}` (zero `F_hat` yields `lambda2 = 0`).
pub fn select_penalties(obs: &ObservationSet, sigma: f64) -> Result<PenaltyPair, SolverError> {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    let d = obs.d1() + obs.d2();
    if d < 3 {
        return Err(SolverError::DimensionTooSmall(d));
    }
    let d_log_d = d as f64 * (d as f64).ln();
    let pi0 = obs.pi0();
    let lambda1 = sigma * (8.0 * pi0 * d_log_d).sqrt();
    let f_hat = (obs.sum_y_squared() / pi0).sqrt();
    let lambda2 = if f_hat > 0.0 {
        lambda1 * (obs.n() as f64 / d_log_d).powf(0.25) / f_hat
    } else {
        0.0
    };
    Ok(PenaltyPair::with_pi0(lambda1, lambda2, pi0))
}

/// Number of singular values above `rel_tol` times the largest; 0 for the
/// zero matrix.
pub fn estimated_rank(m: &DenseMatrix, rel_tol: f64) -> Result<usize, SolverError> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(SolverError::InvalidRankTol(rel_tol));
    }
    let f = matcore::svd(m)?;
    Ok(rank_from_spectrum(&f.s, rel_tol))
}

/// First-order optimality residuals at `z` for the penalized objective.
///
/// Forms `G = (Y_raw - H z - lambda2 z) / lambda1`, where `H` masks
/// entrywise by multiplicity, and measures subgradient membership for the
/// nuclear norm at `z`: the tangent-space part must match `U1 V1^T` and
/// the orthogonal part must have spectral norm at most 1. Returns
/// `(||P_T G - U1 V1^T||_F, ||P_T^perp G||_S)`; at an exact minimizer the
/// first is 0 and the second is at most 1.
pub fn kkt_residual(
    obs: &ObservationSet,
    z: &DenseMatrix,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, f64), SolverError> {
    if lambda1 <= 0.0 {
        return Err(SolverError::ZeroLambda1);
    }
    let (d1, d2) = (obs.d1(), obs.d2());
    let y_raw = obs.raw_sum_matrix();
    let hz = DenseMatrix::from_fn(d1, d2, |i, j| {
        obs.multiplicity(i, j) as f64 * z.get(i, j)
    });
    let g = y_raw.sub(&hz).sub(&z.scale(lambda2)).scale(1.0 / lambda1);

    let f = matcore::svd(z)?;
    let r = rank_from_spectrum(&f.s, RANK_REL_TOL);
    if r == 0 {
        // z = 0: the subgradient condition is just ||G||_S <= 1.
        let s = matcore::norm(&g, matcore::NormKind::Spectral)?;
        return Ok((0.0, s));
    }
    let t = f.truncate(r);
    let uut = t.u.matmul(&t.u.transpose());
    let vvt = t.v.matmul(&t.v.transpose());
    let pt_g = uut
        .matmul(&g)
        .add(&g.matmul(&vvt))
        .sub(&uut.matmul(&g).matmul(&vvt));
    let uv = t.u.matmul(&t.v.transpose());
    let res_t = pt_g.sub(&uv).frobenius_norm();
    let res_perp = matcore::norm(&g.sub(&pt_g), matcore::NormKind::Spectral)?;
    Ok((res_t, res_perp))
}
