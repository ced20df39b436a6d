//! Coherence and spikiness diagnostics, tangent-space machinery, exact
//! dense construction of the oracle-condition operators at desk scale, the
//! three-event condition checker with its deterministic error bound, and
//! the nuclear-norm sandwich inequality check.
//!
//! Operator algebra is done on explicit `(d1 d2) x (d1 d2)` dense matrices
//! below a configurable dimension cap. This keeps the checker exact and
//! directly testable at the cost of restricting it to desk scale; the
//! checker exists to validate theory, not to scale. Above the cap,
//! [`approx_pt_r_op_norm`] estimates the one operator norm that matters
//! most by power iteration on the composed map, clearly labeled
//! approximate.
//!
//! Vectorization convention: entry `(i, j)` of a `d1 x d2` matrix maps to
//! index `i * d2 + j` (row-major), consistently for every operator here.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::matcore::{self, DenseMatrix, MatError};
use crate::obsmodel::{Instance, ObservationSet};
use crate::par;
use crate::shrinkage::PenaltyPair;
use crate::solver::RANK_REL_TOL;

/// Largest `d1 * d2` for which dense operators are assembled.
pub const DEFAULT_DIM_CAP: usize = 4096;

/// Orthonormality tolerance for tangent-space factors.
const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("columns are not orthonormal (defect {defect:e})")]
    NotOrthonormal { defect: f64 },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("matrix is zero")]
    ZeroMatrix,
    #[error("operator dimension {dim} exceeds the cap {cap}")]
    DimCapExceeded { dim: usize, cap: usize },
    #[error(
        "restricted operator singular with lambda2 = {lambda2}; lambda2 > 0 \
         guarantees invertibility on the tangent space"
    )]
    SingularRestriction { lambda2: f64 },
    #[error("resolvent restriction is singular")]
    ResolventSingular,
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
}

/// The tangent space at a rank-`r` matrix with singular factors `U`, `V`:
/// all matrices of the form `U U^T M1 + M2 V V^T`.
#[derive(Debug, Clone)]
pub struct TangentSpace {
    u: DenseMatrix,
    v: DenseMatrix,
}

impl TangentSpace {
    /// Builds a tangent space from orthonormal factors with matching rank.
    pub fn new(u: DenseMatrix, v: DenseMatrix) -> Result<Self, AnalysisError> {
        if u.cols() != v.cols() {
            return Err(AnalysisError::ShapeMismatch {
                expected_rows: u.rows(),
                expected_cols: u.cols(),
                got_rows: v.rows(),
                got_cols: v.cols(),
            });
        }
        if u.cols() == 0 {
            return Err(AnalysisError::ZeroRank);
        }
        for m in [&u, &v] {
            let defect = m
                .transpose()
                .matmul(m)
                .sub(&DenseMatrix::identity(m.cols()))
                .max_abs();
            if defect > ORTHO_TOL {
                return Err(AnalysisError::NotOrthonormal { defect });
            }
        }
        Ok(Self { u, v })
    }

    /// Tangent space at `theta`'s numerical-rank SVD truncation.
    pub fn from_matrix(theta: &DenseMatrix, rank_tol: f64) -> Result<Self, AnalysisError> {
        let f = matcore::svd(theta)?;
        let top = f.s.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return Err(AnalysisError::ZeroMatrix);
        }
        let r = f.s.iter().filter(|&&s| s > rank_tol * top).count();
        let t = f.truncate(r);
        Self::new(t.u, t.v)
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn u(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }

    /// `U V^T`, the subgradient direction associated with this space.
    pub fn uv_t(&self) -> DenseMatrix {
        self.u.matmul(&self.v.transpose())
    }
}

/// Orthogonal projection onto the tangent space:
/// `U U^T M + M V V^T - U U^T M V V^T`.
pub fn tangent_project(ts: &TangentSpace, m: &DenseMatrix) -> Result<DenseMatrix, AnalysisError> {
    if m.rows() != ts.u.rows() || m.cols() != ts.v.rows() {
        return Err(AnalysisError::ShapeMismatch {
            expected_rows: ts.u.rows(),
            expected_cols: ts.v.rows(),
            got_rows: m.rows(),
            got_cols: m.cols(),
        });
    }
    let uut_m = ts.u.matmul(&ts.u.transpose().matmul(m));
    let m_vvt = m.matmul(&ts.v).matmul(&ts.v.transpose());
    let uut_m_vvt = uut_m.matmul(&ts.v).matmul(&ts.v.transpose());
    Ok(uut_m.add(&m_vvt).sub(&uut_m_vvt))
}

/// A linear map on vectorized `d1 x d2` matrices, stored as an explicit
/// dense `(d1 d2) x (d1 d2)` array in the entry basis.
#[derive(Debug, Clone)]
pub struct EntryOperator {
    d1: usize,
    d2: usize,
    mat: DMatrix<f64>,
}

impl EntryOperator {
    fn new(d1: usize, d2: usize, mat: DMatrix<f64>) -> Self {
        debug_assert_eq!(mat.nrows(), d1 * d2);
        debug_assert_eq!(mat.ncols(), d1 * d2);
        Self { d1, d2, mat }
    }

    pub fn dim(&self) -> usize {
        self.d1 * self.d2
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    /// The dense array of the map in the entry basis.
    pub fn as_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_dmatrix(self.mat.clone())
    }

    /// Applies the map: vectorize row-major, multiply, reshape.
    pub fn apply(&self, m: &DenseMatrix) -> DenseMatrix {
        assert_eq!(m.shape(), (self.d1, self.d2), "operator shape mismatch");
        let x = DMatrix::from_column_slice(self.dim(), 1, &m.entries_row_major());
        let y = &self.mat * x;
        DenseMatrix::from_fn(self.d1, self.d2, |i, j| y[(i * self.d2 + j, 0)])
    }

    /// Operator norm, the largest singular value of the dense array.
    pub fn op_norm(&self) -> Result<f64, MatError> {
        matcore::norm(
            &DenseMatrix::from_dmatrix(self.mat.clone()),
            matcore::NormKind::Spectral,
        )
    }
}

fn vec_row_major(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_column_slice(m.rows() * m.cols(), 1, &m.entries_row_major())
}

fn unvec_row_major(d1: usize, d2: usize, v: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(d1, d2, |i, j| v[(i * d2 + j, 0)])
}

/// Dense array of the tangent projection in the entry basis:
/// `P[(i,j),(k,l)] = Pu[i,k] delta_jl + delta_ik Pv[j,l] - Pu[i,k] Pv[j,l]`
/// with `Pu = U U^T`, `Pv = V V^T`.
fn assemble_pt(ts: &TangentSpace) -> DMatrix<f64> {
    let d1 = ts.u.rows();
    let d2 = ts.v.rows();
    let pu = ts.u.matmul(&ts.u.transpose());
    let pv = ts.v.matmul(&ts.v.transpose());
    let dim = d1 * d2;
    let cols = par::map_indices(dim, |col| {
        let (k, l) = (col / d2, col % d2);
        let mut out = vec![0.0; dim];
        for i in 0..d1 {
            let pu_ik = pu.get(i, k);
            for j in 0..d2 {
                let pv_jl = pv.get(j, l);
                let mut val = -pu_ik * pv_jl;
                if j == l {
                    val += pu_ik;
                }
                if i == k {
                    val += pv_jl;
                }
                out[i * d2 + j] = val;
            }
        }
        out
    });
    DMatrix::from_fn(dim, dim, |row, col| cols[col][row])
}

/// Orthonormal basis of the tangent space as columns of a `(d1 d2) x t`
/// matrix, `t = r (d1 + d2 - r)`: the pairs `u_a v_b^T` with `a < r` or
/// `b < r`, where the factors are completed to full orthonormal bases.
fn tangent_basis(ts: &TangentSpace) -> Result<DMatrix<f64>, AnalysisError> {
    let d1 = ts.u.rows();
    let d2 = ts.v.rows();
    let r = ts.rank();
    let u_full = complete_basis(&ts.u)?;
    let v_full = complete_basis(&ts.v)?;
    let t = r * (d1 + d2 - r);
    let mut pairs = Vec::with_capacity(t);
    for a in 0..r {
        for b in 0..d2 {
            pairs.push((a, b));
        }
    }
    for a in r..d1 {
        for b in 0..r {
            pairs.push((a, b));
        }
    }
    debug_assert_eq!(pairs.len(), t);
    let mut b = DMatrix::<f64>::zeros(d1 * d2, t);
    for (col, &(a, bi)) in pairs.iter().enumerate() {
        for i in 0..d1 {
            for j in 0..d2 {
                b[(i * d2 + j, col)] = u_full.get(i, a) * v_full.get(j, bi);
            }
        }
    }
    Ok(b)
}

/// Completes orthonormal columns to a full orthonormal basis of the
/// ambient space, using the SVD of the complementary projector.
fn complete_basis(m: &DenseMatrix) -> Result<DenseMatrix, AnalysisError> {
    let d = m.rows();
    let r = m.cols();
    if r == d {
        return Ok(m.clone());
    }
    let proj = DenseMatrix::identity(d).sub(&m.matmul(&m.transpose()));
    let f = matcore::svd(&proj)?;
    Ok(DenseMatrix::from_fn(d, d, |i, j| {
        if j < r {
            m.get(i, j)
        } else {
            f.u.get(i, j - r)
        }
    }))
}

/// The oracle-condition operators for one instance, assembled exactly.
#[derive(Debug, Clone)]
pub struct Operators {
    /// `H = sum_i P_{omega_i}`, diagonal with the multiplicities.
    pub h: EntryOperator,
    /// `R = (H - pi0) P_T / (pi0 + lambda2)`.
    pub r: EntryOperator,
    /// `Q = I - H (P_T H P_T + lambda2 P_T)^{-1} P_T`, with the inverse
    /// taken on the tangent space (zero on its complement).
    pub q: EntryOperator,
    /// `R(lambda2 Theta + lambda1 U V^T)`.
    pub delta_bar: DenseMatrix,
}

struct Assembled {
    h_diag: Vec<f64>,
    pt: DMatrix<f64>,
    r: DMatrix<f64>,
    q: DMatrix<f64>,
    basis: DMatrix<f64>,
    delta_bar: DenseMatrix,
}

fn assemble(
    obs: &ObservationSet,
    ts: &TangentSpace,
    theta: &DenseMatrix,
    lambda1: f64,
    lambda2: f64,
    cap: usize,
) -> Result<Assembled, AnalysisError> {
    let (d1, d2) = (obs.d1(), obs.d2());
    let dim = d1 * d2;
    if dim > cap {
        return Err(AnalysisError::DimCapExceeded { dim, cap });
    }
    if theta.shape() != (d1, d2) {
        return Err(AnalysisError::ShapeMismatch {
            expected_rows: d1,
            expected_cols: d2,
            got_rows: theta.rows(),
            got_cols: theta.cols(),
        });
    }
    let pi0 = obs.pi0();

    let h_diag: Vec<f64> = (0..dim)
        .map(|k| obs.multiplicity(k / d2, k % d2) as f64)
        .collect();
    let pt = assemble_pt(ts);

    // R scales the rows of P_T by (m_omega - pi0) / (pi0 + lambda2).
    let mut r = pt.clone();
    for (row, &m) in h_diag.iter().enumerate() {
        let scale = (m - pi0) / (pi0 + lambda2);
        for col in 0..dim {
            r[(row, col)] *= scale;
        }
    }

    let basis = tangent_basis(ts)?;
    let t = basis.ncols();

    // Restriction of P_T H P_T + lambda2 P_T to the tangent space.
    let mut hb = basis.clone();
    for (row, &m) in h_diag.iter().enumerate() {
        for col in 0..t {
            hb[(row, col)] *= m;
        }
    }
    let mut k_q = basis.transpose() * hb;
    for i in 0..t {
        k_q[(i, i)] += lambda2;
    }
    let k_q_inv = k_q
        .try_inverse()
        .ok_or(AnalysisError::SingularRestriction { lambda2 })?;

    // Q = I - H B K^{-1} B^T (the trailing P_T is absorbed by B^T).
    let inv_full = &basis * k_q_inv * basis.transpose();
    let mut h_inv = inv_full;
    for (row, &m) in h_diag.iter().enumerate() {
        for col in 0..dim {
            h_inv[(row, col)] *= m;
        }
    }
    let mut q = -h_inv;
    for i in 0..dim {
        q[(i, i)] += 1.0;
    }

    let arg = theta.scale(lambda2).add(&ts.uv_t().scale(lambda1));
    let delta_bar = unvec_row_major(d1, d2, &(&r * vec_row_major(&arg)));

    Ok(Assembled {
        h_diag,
        pt,
        r,
        q,
        basis,
        delta_bar,
    })
}

/// Assembles the operators of the deterministic error-bound conditions
/// with the default dimension cap. `theta` is the matrix whose tangent
/// space `ts` describes; it enters through `delta_bar`.
pub fn build_operators(
    obs: &ObservationSet,
    ts: &TangentSpace,
    theta: &DenseMatrix,
    lambda1: f64,
    lambda2: f64,
) -> Result<Operators, AnalysisError> {
    build_operators_capped(obs, ts, theta, lambda1, lambda2, DEFAULT_DIM_CAP)
}

/// [`build_operators`] with an explicit dimension cap.
pub fn build_operators_capped(
    obs: &ObservationSet,
    ts: &TangentSpace,
    theta: &DenseMatrix,
    lambda1: f64,
    lambda2: f64,
    cap: usize,
) -> Result<Operators, AnalysisError> {
    let (d1, d2) = (obs.d1(), obs.d2());
    let a = assemble(obs, ts, theta, lambda1, lambda2, cap)?;
    let dim = d1 * d2;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for (i, &m) in a.h_diag.iter().enumerate() {
        h[(i, i)] = m;
    }
    Ok(Operators {
        h: EntryOperator::new(d1, d2, h),
        r: EntryOperator::new(d1, d2, a.r),
        q: EntryOperator::new(d1, d2, a.q),
        delta_bar: a.delta_bar,
    })
}

/// Everything the deterministic error bound needs, in one record: the
/// seven inequality left-hand sides, the three event flags, and the bound.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    /// `||P_T R||_op`.
    pub op_norm_ptr: f64,
    /// `s_r >= 5 lambda1 / lambda2` (true when both penalties vanish).
    pub s_r_ratio_ok: bool,
    /// `||P_T delta_bar||_F`.
    pub pt_delta_fnorm: f64,
    /// `||delta_bar - R (P_T R + P_T)^{-1} P_T delta_bar||_S`.
    pub delta_resolvent_snorm: f64,
    /// `||P_T eps||_F`.
    pub pt_eps_fnorm: f64,
    /// `||Q eps||_S`.
    pub q_eps_snorm: f64,
    /// `||P_T^perp eps||_S`.
    pub ptperp_eps_snorm: f64,
    pub event1: bool,
    pub event2: bool,
    pub event3: bool,
    pub all_hold: bool,
    /// `2 sqrt(r) lambda1 / pi0`.
    pub bound_value: f64,
}

impl ConditionReport {
    /// `key=value` lines for harness logs.
    pub fn to_key_value_string(&self) -> String {
        format!(
            "op_norm_PTR={}\ns_r_ratio_ok={}\npt_delta_fnorm={}\ndelta_resolvent_snorm={}\n\
             pt_eps_fnorm={}\nq_eps_snorm={}\nptperp_eps_snorm={}\nevent1={}\nevent2={}\n\
             event3={}\nall_hold={}\nbound_value={}\n",
            self.op_norm_ptr,
            self.s_r_ratio_ok,
            self.pt_delta_fnorm,
            self.delta_resolvent_snorm,
            self.pt_eps_fnorm,
            self.q_eps_snorm,
            self.ptperp_eps_snorm,
            self.event1,
            self.event2,
            self.event3,
            self.all_hold,
            self.bound_value
        )
    }
}

/// Evaluates the seven inequalities of the deterministic error-bound
/// conditions exactly on dense operators.
///
/// `eps_matrix` is the summed noise matrix `sum_i eps_i E_{omega_i}`;
/// [`Instance::noise_matrix`] produces it for synthetic instances.
pub fn check_conditions(
    instance: &Instance,
    ts: &TangentSpace,
    penalties: &PenaltyPair,
    eps_matrix: &DenseMatrix,
) -> Result<ConditionReport, AnalysisError> {
    check_conditions_capped(instance, ts, penalties, eps_matrix, DEFAULT_DIM_CAP)
}

/// [`check_conditions`] with an explicit dimension cap.
pub fn check_conditions_capped(
    instance: &Instance,
    ts: &TangentSpace,
    penalties: &PenaltyPair,
    eps_matrix: &DenseMatrix,
    cap: usize,
) -> Result<ConditionReport, AnalysisError> {
    let obs = &instance.obs;
    let theta = &instance.theta;
    let (lambda1, lambda2) = (penalties.lambda1, penalties.lambda2);
    let a = assemble(obs, ts, theta, lambda1, lambda2, cap)?;
    let (d1, d2) = (obs.d1(), obs.d2());
    let r = ts.rank();

    let ptr = &a.pt * &a.r;
    let op_norm_ptr = matcore::norm(
        &DenseMatrix::from_dmatrix(ptr),
        matcore::NormKind::Spectral,
    )?;

    let s_r = matcore::svd(theta)?.s[r - 1];
    let s_r_ratio_ok = if lambda2 > 0.0 {
        s_r >= 5.0 * lambda1 / lambda2
    } else {
        lambda1 == 0.0
    };

    let pt_delta_fnorm = tangent_project(ts, &a.delta_bar)?.frobenius_norm();

    // Resolvent term: (P_T R + P_T)^{-1} restricted to the tangent space.
    let t = a.basis.ncols();
    let mut k_r = a.basis.transpose() * &a.r * &a.basis;
    for i in 0..t {
        k_r[(i, i)] += 1.0;
    }
    let coords = a.basis.transpose() * vec_row_major(&a.delta_bar);
    let solved = k_r
        .lu()
        .solve(&coords)
        .ok_or(AnalysisError::ResolventSingular)?;
    let back = &a.r * (&a.basis * solved);
    let resolvent_matrix = a.delta_bar.sub(&unvec_row_major(d1, d2, &back));
    let delta_resolvent_snorm = matcore::norm(&resolvent_matrix, matcore::NormKind::Spectral)?;

    let pt_eps = tangent_project(ts, eps_matrix)?;
    let pt_eps_fnorm = pt_eps.frobenius_norm();
    let q_eps = unvec_row_major(d1, d2, &(&a.q * vec_row_major(eps_matrix)));
    let q_eps_snorm = matcore::norm(&q_eps, matcore::NormKind::Spectral)?;
    let ptperp_eps_snorm =
        matcore::norm(&eps_matrix.sub(&pt_eps), matcore::NormKind::Spectral)?;

    let sqrt_r = (r as f64).sqrt();
    let event1 = op_norm_ptr <= 0.5 && s_r_ratio_ok;
    let event2 =
        pt_delta_fnorm <= sqrt_r * lambda1 / 8.0 && delta_resolvent_snorm <= lambda1 / 4.0;
    let event3 = pt_eps_fnorm <= sqrt_r * lambda1 / 8.0
        && q_eps_snorm <= 0.75 * lambda1
        && ptperp_eps_snorm <= lambda1;
    let all_hold = event1 && event2 && event3;

    Ok(ConditionReport {
        op_norm_ptr,
        s_r_ratio_ok,
        pt_delta_fnorm,
        delta_resolvent_snorm,
        pt_eps_fnorm,
        q_eps_snorm,
        ptperp_eps_snorm,
        event1,
        event2,
        event3,
        all_hold,
        bound_value: theorem2_bound(penalties, obs, r),
    })
}

/// The deterministic error bound `2 sqrt(r) lambda1 / pi0`.
pub fn theorem2_bound(penalties: &PenaltyPair, obs: &ObservationSet, r: usize) -> f64 {
    2.0 * (r as f64).sqrt() * penalties.lambda1 / obs.pi0()
}

/// Coherence and spikiness summary of a matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherenceStats {
    /// `max{(d1/r) ||U U^T||_inf, (d2/r) ||V V^T||_inf}`.
    pub mu0: f64,
    /// `sqrt(d1 d2 / r) ||U V^T||_inf`.
    pub mu1: f64,
    /// `||Theta||_inf sqrt(d1 d2) / ||Theta||_F`.
    pub alpha_sp: f64,
    /// `||Theta||_F / (sqrt(r) s_r)`.
    pub kappa_star: f64,
    /// Numerical rank used for the factors.
    pub rank: usize,
}

/// Computes the coherence constants, spikiness, and spectrum conditioning
/// of a nonzero matrix, at the given relative rank cutoff.
pub fn coherence_stats(
    theta: &DenseMatrix,
    rank_tol: f64,
) -> Result<CoherenceStats, AnalysisError> {
    let f = matcore::svd(theta)?;
    let top = f.s.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(AnalysisError::ZeroMatrix);
    }
    let r = f.s.iter().filter(|&&s| s > rank_tol * top).count();
    let t = f.truncate(r);
    let (d1, d2) = theta.shape();
    let rf = r as f64;
    let uut = t.u.matmul(&t.u.transpose());
    let vvt = t.v.matmul(&t.v.transpose());
    let uvt = t.u.matmul(&t.v.transpose());
    let mu0 = ((d1 as f64 / rf) * uut.max_abs()).max((d2 as f64 / rf) * vvt.max_abs());
    let mu1 = ((d1 * d2) as f64 / rf).sqrt() * uvt.max_abs();
    let fro = theta.frobenius_norm();
    let alpha_sp = theta.max_abs() * ((d1 * d2) as f64).sqrt() / fro;
    let kappa_star = fro / (rf.sqrt() * t.s[r - 1]);
    Ok(CoherenceStats {
        mu0,
        mu1,
        alpha_sp,
        kappa_star,
        rank: r,
    })
}

/// The two sides of the nuclear-norm expansion sandwich around `theta`:
/// `middle = ||M||_N - ||Theta||_N - ||P_T^perp M||_N - <U V^T, M - Theta>`
/// and
/// `upper = ||(P_T M - Theta) V D^{-1/2}||_F^2 + ||D^{-1/2} U^T (P_T M - Theta)||_F^2`,
/// with `0 <= middle <= upper`.
pub fn prop1_gap(theta: &DenseMatrix, m: &DenseMatrix) -> Result<(f64, f64), AnalysisError> {
    if theta.shape() != m.shape() {
        return Err(AnalysisError::ShapeMismatch {
            expected_rows: theta.rows(),
            expected_cols: theta.cols(),
            got_rows: m.rows(),
            got_cols: m.cols(),
        });
    }
    let f = matcore::svd(theta)?;
    let top = f.s.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(AnalysisError::ZeroMatrix);
    }
    let r = f.s.iter().filter(|&&s| s > RANK_REL_TOL * top).count();
    let t = f.truncate(r);
    let ts = TangentSpace::new(t.u.clone(), t.v.clone())?;

    let pt_m = tangent_project(&ts, m)?;
    let ptperp_m = m.sub(&pt_m);
    let nuc = |x: &DenseMatrix| matcore::norm(x, matcore::NormKind::Nuclear);
    let uv = ts.uv_t();
    let middle = nuc(m)? - nuc(theta)? - nuc(&ptperp_m)?
        - matcore::inner_product(&uv, &m.sub(theta))?;

    let d_inv_sqrt = DenseMatrix::from_fn(r, r, |i, j| {
        if i == j {
            1.0 / t.s[i].sqrt()
        } else {
            0.0
        }
    });
    let diff = pt_m.sub(theta);
    let right = diff.matmul(&t.v).matmul(&d_inv_sqrt);
    let left = d_inv_sqrt.matmul(&t.u.transpose()).matmul(&diff);
    let upper = right.frobenius_norm_sq() + left.frobenius_norm_sq();
    Ok((middle, upper))
}

/// Monte-Carlo estimate of `||P_T R||_op` by power iteration on the
/// composed map, for problems above the dense-operator cap. The map is
/// applied functionally (no materialization); since the composition is
/// self-adjoint, the dominant eigenvalue magnitude is the operator norm.
/// Approximate by construction: accuracy depends on the spectral gap and
/// the iteration budget.
pub fn approx_pt_r_op_norm(
    obs: &ObservationSet,
    ts: &TangentSpace,
    lambda2: f64,
    iters: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    let (d1, d2) = (obs.d1(), obs.d2());
    let pi0 = obs.pi0();
    let apply = |m: &DenseMatrix| -> Result<DenseMatrix, AnalysisError> {
        let t1 = tangent_project(ts, m)?;
        let t2 = DenseMatrix::from_fn(d1, d2, |i, j| {
            (obs.multiplicity(i, j) as f64 - pi0) * t1.get(i, j)
        });
        Ok(tangent_project(ts, &t2)?.scale(1.0 / (pi0 + lambda2)))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DenseMatrix::from_fn(d1, d2, |_, _| StandardNormal.sample(&mut rng));
    x = x.scale(1.0 / x.frobenius_norm());
    let mut norm = 0.0;
    for _ in 0..iters {
        let y = apply(&x)?;
        let n = y.frobenius_norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        norm = n;
        x = y.scale(1.0 / n);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obsmodel::{build_observations, generate_instance, SampleMode};
    use crate::testkit;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn random_low_rank(rng: &mut impl Rng, d1: usize, d2: usize, r: usize) -> DenseMatrix {
        let u = random_matrix(rng, d1, r);
        let v = random_matrix(rng, d2, r);
        u.matmul(&v.transpose())
    }

    fn full_grid_obs(m: &DenseMatrix) -> ObservationSet {
        let triples: Vec<(usize, usize, f64)> = (0..m.rows())
            .flat_map(|i| (0..m.cols()).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, m.get(i, j)))
            .collect();
        build_observations(m.rows(), m.cols(), &triples).unwrap()
    }

    #[test]
    fn projection_fixes_points_of_the_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = random_low_rank(&mut rng, 4, 5, 2);
        let ts = TangentSpace::from_matrix(&theta, RANK_REL_TOL).unwrap();
        let uv = ts.uv_t();
        let fixed = tangent_project(&ts, &uv).unwrap();
        assert!(fixed.sub(&uv).max_abs() < 1e-12);
    }

    #[test]
    fn projection_on_unit_tangent_space_zeroes_one_corner() {
        // U = e1, V = e1 in 2x2: [[a, b], [c, d]] -> [[a, b], [c, 0]].
        let u = DenseMatrix::from_rows(2, 1, &[1.0, 0.0]).unwrap();
        let v = DenseMatrix::from_rows(2, 1, &[1.0, 0.0]).unwrap();
        let ts = TangentSpace::new(u, v).unwrap();
        let m = DenseMatrix::from_rows(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = tangent_project(&ts, &m).unwrap();
        let expect = DenseMatrix::from_rows(2, 2, &[1.0, 2.0, 3.0, 0.0]).unwrap();
        assert!(p.sub(&expect).max_abs() < 1e-12);
    }

    #[test]
    fn projection_is_idempotent_and_self_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = random_low_rank(&mut rng, 5, 4, 2);
        let ts = TangentSpace::from_matrix(&theta, RANK_REL_TOL).unwrap();
        for _ in 0..10 {
            let m = random_matrix(&mut rng, 5, 4);
            let p = tangent_project(&ts, &m).unwrap();
            let pp = tangent_project(&ts, &p).unwrap();
            assert!(pp.sub(&p).max_abs() < 1e-12);
            let b = random_matrix(&mut rng, 5, 4);
            let lhs = matcore::inner_product(&p, &b).unwrap();
            let rhs =
                matcore::inner_product(&m, &tangent_project(&ts, &b).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn tangent_space_rejects_skewed_factors() {
        let u = DenseMatrix::from_rows(2, 1, &[1.0, 1.0]).unwrap();
        let v = DenseMatrix::from_rows(2, 1, &[1.0, 0.0]).unwrap();
        assert!(matches!(
            TangentSpace::new(u, v),
            Err(AnalysisError::NotOrthonormal { .. })
        ));
    }

    #[test]
    fn coherence_of_flat_matrix_is_one() {
        let c = DenseMatrix::from_fn(4, 6, |_, _| 2.5);
        let stats = coherence_stats(&c, RANK_REL_TOL).unwrap();
        assert_eq!(stats.rank, 1);
        assert!((stats.alpha_sp - 1.0).abs() < 1e-12);
        assert!((stats.mu1 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn coherence_of_single_entry_matrix() {
        let theta = DenseMatrix::from_rows(2, 2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let stats = coherence_stats(&theta, RANK_REL_TOL).unwrap();
        assert_eq!(stats.rank, 1);
        assert!((stats.mu0 - 2.0).abs() < 1e-12);
        assert!((stats.alpha_sp - 2.0).abs() < 1e-12);
        assert!(matches!(
            coherence_stats(&DenseMatrix::zeros(2, 2), RANK_REL_TOL),
            Err(AnalysisError::ZeroMatrix)
        ));
    }

    #[test]
    fn identity_block_has_unit_spectrum_conditioning() {
        let theta = DenseMatrix::from_fn(5, 5, |i, j| if i == j && i < 3 { 1.0 } else { 0.0 });
        let stats = coherence_stats(&theta, RANK_REL_TOL).unwrap();
        assert_eq!(stats.rank, 3);
        assert!((stats.kappa_star - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coherence_stats_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random_low_rank(&mut rng, 5, 4, 2);
        let a = coherence_stats(&theta, RANK_REL_TOL).unwrap();
        let b = coherence_stats(&theta.scale(7.5), RANK_REL_TOL).unwrap();
        assert!((a.mu0 - b.mu0).abs() < 1e-9);
        assert!((a.mu1 - b.mu1).abs() < 1e-9);
        assert!((a.alpha_sp - b.alpha_sp).abs() < 1e-12);
        assert!((a.kappa_star - b.kappa_star).abs() < 1e-9);
    }

    #[test]
    fn dense_projection_is_a_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = random_low_rank(&mut rng, 3, 4, 1);
        let ts = TangentSpace::from_matrix(&theta, RANK_REL_TOL).unwrap();
        let pt = assemble_pt(&ts);
        let defect = (&pt * &pt - &pt).amax();
        assert!(defect < 1e-8, "P^2 - P defect {defect}");
        // Matches the functional projection on random inputs.
        for _ in 0..5 {
            let m = random_matrix(&mut rng, 3, 4);
            let via_dense = unvec_row_major(3, 4, &(&pt * vec_row_major(&m)));
            let via_formula = tangent_project(&ts, &m).unwrap();
            assert!(via_dense.sub(&via_formula).max_abs() < 1e-12);
        }
    }

    #[test]
    fn h_is_diagonal_with_multiplicities() {
        let obs =
            build_observations(2, 3, &[(0, 1, 1.0), (0, 1, 2.0), (1, 2, 3.0)]).unwrap();
        let theta = DenseMatrix::from_fn(2, 3, |i, j| (i + j) as f64 + 1.0);
        let ts = TangentSpace::from_matrix(&theta, RANK_REL_TOL).unwrap();
        let ops = build_operators(&obs, &ts, &theta, 0.1, 0.2).unwrap();
        let h = ops.h.as_matrix();
        for row in 0..6 {
            for col in 0..6 {
                let expect = if row == col {
                    obs.multiplicity(row / 3, row % 3) as f64
                } else {
                    0.0
                };
                assert_eq!(h.get(row, col), expect);
            }
        }
    }

    #[test]
    fn full_observation_makes_r_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = random_low_rank(&mut rng, 3, 3, 1);
        let obs = full_grid_obs(&theta);
        let ts = TangentSpace::from_matrix(&theta, RANK_REL_TOL).unwrap();
        let ops = build_operators(&obs, &ts, &theta, 0.3, 0.2).unwrap();
        assert!(ops.r.as_matrix().max_abs() < 1e-12);
        assert!(ops.delta_bar.max_abs() < 1e-12);
    }

    #[test]
    fn zero_penalties_make_delta_bar_vanish() {
        let inst = generate_instance(3, 3, 1, 5, 0.1, SampleMode::UniformNoTies, 6).unwrap();
        let ts = TangentSpace::from_matrix(&inst.theta, RANK_REL_TOL).unwrap();
        let ops = build_operators(&inst.obs, &ts, &inst.theta, 0.0, 0.0).unwrap();
        assert_eq!(ops.delta_bar.max_abs(), 0.0);
    }

    #[test]
    fn assembled_r_matches_composition_of_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = generate_instance(3, 3, 1, 6, 0.2, SampleMode::IidUniform, 7).unwrap();
        let ts = TangentSpace::from_matrix(&inst.theta, RANK_REL_TOL).unwrap();
        let lambda2 = 0.4;
        let ops = build_operators(&inst.obs, &ts, &inst.theta, 0.1, lambda2).unwrap();
        let pi0 = inst.obs.pi0();
        for _ in 0..5 {
            let m = random_matrix(&mut rng, 3, 3);
            let assembled = ops.r.apply(&m);
            // Compose by hand: project, mask by multiplicity, subtract
            // pi0 times the projection, rescale.
            let p = tangent_project(&ts, &m).unwrap();
            let composed = DenseMatrix::from_fn(3, 3, |i, j| {
                let hp = inst.obs.multiplicity(i, j) as f64 * p.get(i, j);
                (hp - pi0 * p.get(i, j)) / (pi0 + lambda2)
            });
            assert!(assembled.sub(&composed).max_abs() < 1e-10);
        }
    }

    #[test]
    fn restricted_inverse_is_identity_on_the_space() {
        let inst = generate_instance(3, 4, 1, 7, 0.2, SampleMode::IidUniform, 8).unwrap();
        let ts = TangentSpace::from_matrix(&inst.theta, RANK_REL_TOL).unwrap();
        let lambda2 = 0.3;
        let a = assemble(&inst.obs, &ts, &inst.theta, 0.1, lambda2, DEFAULT_DIM_CAP).unwrap();
        let t = a.basis.ncols();
        let mut hb = a.basis.clone();
        for (row, &m) in a.h_diag.iter().enumerate() {
            for col in 0..t {
                hb[(row, col)] *= m;
            }
        }
        let mut k = a.basis.transpose() * hb;
        for i in 0..t {
            k[(i, i)] += lambda2;
        }
        let k_inv = k.clone().try_inverse().unwrap();
        let defect = (k_inv * k - DMatrix::<f64>::identity(t, t)).amax();
        assert!(defect < 1e-8, "inverse defect {defect}");
    }

    #[test]
    fn q_satisfies_its_defining_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = generate_instance(3, 3, 1, 8, 0.2, SampleMode::IidUniform, 9).unwrap();
        let ts = TangentSpace::from_matrix(&inst.theta, RANK_REL_TOL).unwrap();
        let lambda2 = 0.5;
        let ops = build_operators(&inst.obs, &ts, &inst.theta, 0.1, lambda2).unwrap();
        let a = assemble(&inst.obs, &ts, &inst.theta, 0.1, lambda2, DEFAULT_DIM_CAP).unwrap();
        for _ in 0..5 {
            let m = random_matrix(&mut rng, 3, 3);
            let qm = ops.q.apply(&m);
            // I - H (restricted inverse) P_T, composed step by step.
            let pm = tangent_project(&ts, &m).unwrap();
            let coords = a.basis.transpose() * vec_row_major(&pm);
            let t = a.basis.ncols();
            let mut hb = a.basis.clone();
            for (row, &mult) in a.h_diag.iter().enumerate() {
                for col in 0..t {
                    hb[(row, col)] *= mult;
                }
            }
            let mut k = a.basis.transpose() * hb;
            for i in 0..t {
                k[(i, i)] += lambda2;
            }
            let w = k.lu().solve(&coords).unwrap();
            let inv_p = unvec_row_major(3, 3, &(&a.basis * w));
            let h_inv_p = DenseMatrix::from_fn(3, 3, |i, j| {
                inst.obs.multiplicity(i, j) as f64 * inv_p.get(i, j)
            });
            let composed = m.sub(&h_inv_p);
            assert!(qm.sub(&composed).max_abs() < 1e-8);
        }
    }

    #[test]
    fn dimension_cap_is_enforced() {
        let inst = generate_instance(4, 4, 1, 8, 0.1, SampleMode::UniformNoTies, 10).unwrap();
        let ts = TangentSpace::from_matrix(&inst.theta, RANK_REL_TOL).unwrap();
        assert!(matches!(
            build_operators_capped(&inst.obs, &ts, &inst.theta, 0.1, 0.1, 10),
            Err(AnalysisError::DimCapExceeded { dim: 16, cap: 10 })
        ));
    }

    #[test]
    fn singular_restriction_reported_when_unregularized() {
        // Observations miss whole rows of the tangent space and lambda2 = 0,
        // so the restricted operator cannot be inverted.
        let obs = build_observations(2, 2, &[(0, 0, 1.0)]).unwrap();
        let u = DenseMatrix::from_rows(2, 1, &[1.0, 0.0]).unwrap();
        let v = DenseMatrix::from_rows(2, 1, &[1.0, 0.0]).unwrap();
        let ts = TangentSpace::new(u, v).unwrap();
        let theta = DenseMatrix::from_rows(2, 2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            build_operators(&obs, &ts, &theta, 0.1, 0.0),
            Err(AnalysisError::SingularRestriction { .. })
        ));
    }

    #[test]
    fn zero_noise_clears_the_noise_event() {
        let inst = generate_instance(4, 4, 1, 12, 0.0, SampleMode::UniformNoTies, 11).unwrap();
        let ts = TangentSpace::from_matrix(&inst.theta, RANK_REL_TOL).unwrap();
        let pen = PenaltyPair::with_pi0(0.5, 0.4, inst.obs.pi0());
        let eps = inst.noise_matrix();
        assert_eq!(eps.max_abs(), 0.0);
        let report = check_conditions(&inst, &ts, &pen, &eps).unwrap();
        assert_eq!(report.pt_eps_fnorm, 0.0);
        assert_eq!(report.q_eps_snorm, 0.0);
        assert_eq!(report.ptperp_eps_snorm, 0.0);
        assert!(report.event3);
    }

    #[test]
    fn full_observation_with_tame_penalties_satisfies_event1() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let theta = random_low_rank(&mut rng, 4, 4, 1);
        let obs = full_grid_obs(&theta);
        let s_r = matcore::svd(&theta).unwrap().s[0];
        let lambda2 = 0.5;
        let lambda1 = lambda2 * s_r / 5.0 * 0.9;
        let ts = TangentSpace::from_matrix(&theta, RANK_REL_TOL).unwrap();
        let inst = Instance {
            theta: theta.clone(),
            obs,
            noise_sigma: 0.0,
            seed: 0,
            rank: 1,
            mode: SampleMode::UniformNoTies,
        };
        let pen = PenaltyPair::with_pi0(lambda1, lambda2, 1.0);
        let report =
            check_conditions(&inst, &ts, &pen, &DenseMatrix::zeros(4, 4)).unwrap();
        assert_eq!(report.op_norm_ptr, 0.0);
        assert!(report.event1);
        assert!(report.all_hold);
    }

    #[test]
    fn reported_norms_match_independent_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inst = generate_instance(4, 4, 1, 12, 0.1, SampleMode::IidUniform, 13).unwrap();
        let ts = TangentSpace::from_matrix(&inst.theta, RANK_REL_TOL).unwrap();
        let pen = PenaltyPair::with_pi0(0.8, 0.6, inst.obs.pi0());
        let eps = inst.noise_matrix();
        let report = check_conditions(&inst, &ts, &pen, &eps).unwrap();

        // ||P_T R||_op by power iteration on the composed (self-adjoint) map.
        let pi0 = inst.obs.pi0();
        let compose = |m: &DenseMatrix| {
            let t1 = tangent_project(&ts, m).unwrap();
            let t2 = DenseMatrix::from_fn(4, 4, |i, j| {
                (inst.obs.multiplicity(i, j) as f64 - pi0) * t1.get(i, j)
            });
            tangent_project(&ts, &t2).unwrap().scale(1.0 / (pi0 + 0.6))
        };
        let power = testkit::op_norm_power(&compose, &compose, 4, 4, 20_000, &mut rng);
        assert!(
            (power - report.op_norm_ptr).abs() <= 1e-8 * (1.0 + report.op_norm_ptr),
            "power {power} vs dense {}",
            report.op_norm_ptr
        );

        // Definition-based norms.
        let pt_eps = tangent_project(&ts, &eps).unwrap();
        assert!((pt_eps.frobenius_norm() - report.pt_eps_fnorm).abs() < 1e-10);
        let perp = eps.sub(&pt_eps);
        let s_perp = matcore::svd(&perp).unwrap().s[0];
        assert!((s_perp - report.ptperp_eps_snorm).abs() < 1e-10);
    }

    #[test]
    fn bound_arithmetic() {
        let inst = generate_instance(4, 4, 2, 8, 0.1, SampleMode::UniformNoTies, 14).unwrap();
        // pi0 = 0.5 exactly.
        let pen = PenaltyPair::new(1.0, 0.0);
        assert_eq!(theorem2_bound(&pen, &inst.obs, 4), 8.0);
        assert_eq!(theorem2_bound(&PenaltyPair::new(0.0, 0.0), &inst.obs, 4), 0.0);
    }

    #[test]
    fn sandwich_is_tight_at_theta_and_blind_to_perpendicular_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let theta = random_low_rank(&mut rng, 5, 4, 2);
        let (middle, upper) = prop1_gap(&theta, &theta).unwrap();
        assert!(middle.abs() < 1e-10);
        assert!(upper.abs() < 1e-10);

        let ts = TangentSpace::from_matrix(&theta, RANK_REL_TOL).unwrap();
        for _ in 0..10 {
            let n = random_matrix(&mut rng, 5, 4);
            let perp = n.sub(&tangent_project(&ts, &n).unwrap());
            let m = theta.add(&perp);
            let (middle, _) = prop1_gap(&theta, &m).unwrap();
            assert!(middle.abs() < 1e-9, "perpendicular shift leaked: {middle}");
        }
    }

    #[test]
    fn sandwich_holds_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let theta = random_low_rank(&mut rng, 5, 4, 2);
            let m = random_matrix(&mut rng, 5, 4);
            let (middle, upper) = prop1_gap(&theta, &m).unwrap();
            assert!(middle >= -1e-10, "middle {middle}");
            assert!(upper - middle >= -1e-10, "gap {}", upper - middle);
        }
    }

    #[test]
    fn approximate_op_norm_agrees_with_dense_value() {
        let inst = generate_instance(4, 4, 1, 10, 0.1, SampleMode::IidUniform, 17).unwrap();
        let ts = TangentSpace::from_matrix(&inst.theta, RANK_REL_TOL).unwrap();
        let pen = PenaltyPair::with_pi0(0.5, 0.3, inst.obs.pi0());
        let eps = inst.noise_matrix();
        let report = check_conditions(&inst, &ts, &pen, &eps).unwrap();
        let approx = approx_pt_r_op_norm(&inst.obs, &ts, 0.3, 20_000, 99).unwrap();
        assert!(
            (approx - report.op_norm_ptr).abs() <= 1e-6 * (1.0 + report.op_norm_ptr),
            "approx {approx} vs dense {}",
            report.op_norm_ptr
        );
    }

    #[test]
    fn report_serializes_to_key_value_lines() {
        let inst = generate_instance(3, 3, 1, 6, 0.1, SampleMode::UniformNoTies, 18).unwrap();
        let ts = TangentSpace::from_matrix(&inst.theta, RANK_REL_TOL).unwrap();
        let pen = PenaltyPair::with_pi0(0.5, 0.3, inst.obs.pi0());
        let report = check_conditions(&inst, &ts, &pen, &inst.noise_matrix()).unwrap();
        let text = report.to_key_value_string();
        for key in [
            "op_norm_PTR=",
            "s_r_ratio_ok=",
            "pt_delta_fnorm=",
            "delta_resolvent_snorm=",
            "pt_eps_fnorm=",
            "q_eps_snorm=",
            "ptperp_eps_snorm=",
            "event1=",
            "event2=",
            "event3=",
            "all_hold=",
            "bound_value=",
        ] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
    }
}
