//! The scaled soft-thresholding SVD prox operator and the objective
//! functions it optimizes.
//!
//! For penalties `lambda1` (nuclear) and `lambda2` (squared Frobenius),
//! the unique minimizer of
//!
//! ```text
//! ||Z - W||_F^2 / 2 + lambda1 ||Z||_N + (lambda2 / 2) ||Z||_F^2
//! ```
//!
//! keeps the singular vectors of `W` and maps each singular value `s` to
//! `(s - lambda1)_+ / (1 + lambda2)`. Values exactly equal to `lambda1`
//! land in the zero set, so rank counts are deterministic at the boundary.

use crate::matcore::{self, DenseMatrix, MatError};
use crate::obsmodel::ObservationSet;

/// A `(lambda1, lambda2)` penalty pair, optionally carrying the
/// calibration factor `xi = 1 + lambda2 / pi0` once a sample-fraction
/// context exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyPair {
    pub lambda1: f64,
    pub lambda2: f64,
    pub xi: Option<f64>,
}

impl PenaltyPair {
    /// A penalty pair with no sample-fraction context attached.
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        assert!(lambda1 >= 0.0, "lambda1 must be nonnegative");
        assert!(lambda2 >= 0.0, "lambda2 must be nonnegative");
        Self {
            lambda1,
            lambda2,
            xi: None,
        }
    }

    /// Attaches the calibration factor `xi = 1 + lambda2 / pi0`.
    pub fn with_pi0(lambda1: f64, lambda2: f64, pi0: f64) -> Self {
        assert!(pi0 > 0.0, "pi0 must be positive");
        let mut p = Self::new(lambda1, lambda2);
        p.xi = Some(1.0 + lambda2 / pi0);
        p
    }
}

/// Soft-thresholds and rescales the singular values of `W`:
/// `U diag((s_i - lambda1)_+ / (1 + lambda2)) V^T`.
pub fn shrink(w: &DenseMatrix, lambda1: f64, lambda2: f64) -> Result<DenseMatrix, MatError> {
    Ok(shrink_with_spectrum(w, lambda1, lambda2)?.0)
}

/// Like [`shrink`] but also returns the singular values of the output,
/// which the solver reuses to evaluate objectives without a second
/// factorization.
pub fn shrink_with_spectrum(
    w: &DenseMatrix,
    lambda1: f64,
    lambda2: f64,
) -> Result<(DenseMatrix, Vec<f64>), MatError> {
    assert!(lambda1 >= 0.0, "lambda1 must be nonnegative");
    assert!(lambda2 >= 0.0, "lambda2 must be nonnegative");
    let f = matcore::svd(w)?;
    let shrunk: Vec<f64> = f
        .s
        .iter()
        .map(|&s| (s - lambda1).max(0.0) / (1.0 + lambda2))
        .collect();
    let out = DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| {
        let mut acc = 0.0;
        for (k, &s) in shrunk.iter().enumerate() {
            if s > 0.0 {
                acc += s * f.u.get(i, k) * f.v.get(j, k);
            }
        }
        acc
    });
    Ok((out, shrunk))
}

/// Evaluates `||Z - W||_F^2 / 2 + lambda1 ||Z||_N + (lambda2 / 2)
/// ||Z||_F^2`, the objective [`shrink`] minimizes.
pub fn prox_objective(
    z: &DenseMatrix,
    w: &DenseMatrix,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64, MatError> {
    if z.shape() != w.shape() {
        return Err(MatError::ShapeMismatch {
            lhs_rows: z.rows(),
            lhs_cols: z.cols(),
            rhs_rows: w.rows(),
            rhs_cols: w.cols(),
        });
    }
    let fit = 0.5 * z.sub(w).frobenius_norm_sq();
    let nuclear = matcore::norm(z, matcore::NormKind::Nuclear)?;
    Ok(fit + lambda1 * nuclear + 0.5 * lambda2 * z.frobenius_norm_sq())
}

/// Evaluates the penalized least-squares objective over the raw sample
/// list (ties counted with multiplicity):
///
/// ```text
/// sum_i M_{omega_i}^2 / 2 - sum_i y_i M_{omega_i}
///     + lambda1 ||M||_N + (lambda2 / 2) ||M||_F^2
/// ```
pub fn enet_objective(
    m: &DenseMatrix,
    obs: &ObservationSet,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64, MatError> {
    if m.shape() != (obs.d1(), obs.d2()) {
        return Err(MatError::ShapeMismatch {
            lhs_rows: m.rows(),
            lhs_cols: m.cols(),
            rhs_rows: obs.d1(),
            rhs_cols: obs.d2(),
        });
    }
    let mut quad = 0.0;
    for &(i, j, y) in obs.samples() {
        let v = m.get(i, j);
        quad += 0.5 * v * v - y * v;
    }
    let nuclear = matcore::norm(m, matcore::NormKind::Nuclear)?;
    Ok(quad + lambda1 * nuclear + 0.5 * lambda2 * m.frobenius_norm_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::svd;
    use crate::obsmodel::build_observations;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn shrink_diagonal_example() {
        let w = DenseMatrix::from_rows(2, 2, &[3.0, 0.0, 0.0, 1.0]).unwrap();
        let out = shrink(&w, 1.0, 0.0).unwrap();
        let expect = DenseMatrix::from_rows(2, 2, &[2.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(out.sub(&expect).max_abs() < 1e-12);
    }

    #[test]
    fn pure_ridge_halves_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(&mut rng, 3, 4);
        let out = shrink(&w, 0.0, 1.0).unwrap();
        assert!(out.sub(&w.scale(0.5)).max_abs() < 1e-12);
    }

    #[test]
    fn threshold_above_spectral_norm_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_matrix(&mut rng, 4, 3);
        let top = svd(&w).unwrap().s[0];
        let out = shrink(&w, top + 0.1, 0.3).unwrap();
        assert_eq!(out.max_abs(), 0.0);
        // Boundary: a singular value exactly at lambda1 maps to zero.
        let w = DenseMatrix::from_rows(2, 2, &[2.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(shrink(&w, 2.0, 0.0).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn shrink_with_zero_penalties_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_matrix(&mut rng, 5, 3);
        let out = shrink(&w, 0.0, 0.0).unwrap();
        assert!(out.sub(&w).max_abs() < 1e-12);
    }

    #[test]
    fn prox_objective_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_matrix(&mut rng, 3, 3);
        assert_eq!(prox_objective(&w, &w, 0.0, 0.0).unwrap(), 0.0);
        let zero = DenseMatrix::zeros(3, 3);
        let at_zero = prox_objective(&zero, &w, 0.7, 0.3).unwrap();
        assert!((at_zero - 0.5 * w.frobenius_norm_sq()).abs() < 1e-12);
        let bad = DenseMatrix::zeros(2, 3);
        assert!(prox_objective(&bad, &w, 0.0, 0.0).is_err());
    }

    #[test]
    fn shrink_output_beats_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let w = random_matrix(&mut rng, 3, 4);
            let lambda1 = rng.random_range(0.0..2.0);
            let lambda2 = rng.random_range(0.0..2.0);
            let z = shrink(&w, lambda1, lambda2).unwrap();
            let fz = prox_objective(&z, &w, lambda1, lambda2).unwrap();
            for _ in 0..200 {
                let scale = 10.0_f64.powf(rng.random_range(-4.0..0.0));
                let delta = random_matrix(&mut rng, 3, 4).scale(scale);
                let cand = z.add(&delta);
                let fc = prox_objective(&cand, &w, lambda1, lambda2).unwrap();
                assert!(
                    fc >= fz - 1e-11 * (1.0 + fz.abs()),
                    "perturbation beat the prox output: {fc} < {fz}"
                );
            }
        }
    }

    #[test]
    fn singular_values_nonincreasing_in_lambda1() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_matrix(&mut rng, 4, 4);
        let lambdas = [0.0, 0.2, 0.5, 1.0, 2.0, 5.0];
        let mut prev: Option<Vec<f64>> = None;
        for &l1 in &lambdas {
            let (_, s) = shrink_with_spectrum(&w, l1, 0.4).unwrap();
            if let Some(p) = prev {
                for (a, b) in p.iter().zip(&s) {
                    assert!(b <= a);
                }
            }
            prev = Some(s);
        }
    }

    #[test]
    fn enet_objective_zero_matrix_is_zero() {
        let obs = build_observations(2, 2, &[(0, 0, 1.0), (1, 1, -2.0)]).unwrap();
        let m = DenseMatrix::zeros(2, 2);
        assert_eq!(enet_objective(&m, &obs, 0.5, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn enet_objective_collapses_when_fully_observed() {
        // Full observation, no ties, no penalties: the objective is
        // ||M||_F^2 / 2 - <Y, M>.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = random_matrix(&mut rng, 3, 3);
        let triples: Vec<(usize, usize, f64)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, y.get(i, j)))
            .collect();
        let obs = build_observations(3, 3, &triples).unwrap();
        let m = random_matrix(&mut rng, 3, 3);
        let got = enet_objective(&m, &obs, 0.0, 0.0).unwrap();
        let expect =
            0.5 * m.frobenius_norm_sq() - crate::matcore::inner_product(&y, &m).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn enet_objective_matches_brute_force_with_ties() {
        let obs = build_observations(2, 2, &[(0, 0, 1.0), (0, 0, 3.0), (1, 0, -1.0)]).unwrap();
        let m = DenseMatrix::from_rows(2, 2, &[0.5, 2.0, -1.5, 0.25]).unwrap();
        let (l1, l2) = (0.3, 0.7);
        let got = enet_objective(&m, &obs, l1, l2).unwrap();
        let mut expect = 0.0;
        for &(i, j, y) in obs.samples() {
            expect += 0.5 * m.get(i, j) * m.get(i, j) - y * m.get(i, j);
        }
        expect += l1 * crate::matcore::norm(&m, crate::matcore::NormKind::Nuclear).unwrap();
        expect += 0.5 * l2 * m.frobenius_norm_sq();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn penalty_pair_calibration_factor() {
        let p = PenaltyPair::with_pi0(1.0, 0.25, 0.5);
        assert_eq!(p.xi, Some(1.5));
        assert_eq!(PenaltyPair::new(1.0, 0.25).xi, None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn shrink_scaling_identity(
            entries in proptest::collection::vec(-5.0_f64..5.0, 12),
            c in 0.1_f64..10.0,
            lambda1 in 0.0_f64..2.0,
            lambda2 in 0.0_f64..2.0,
        ) {
            let w = DenseMatrix::from_rows(3, 4, &entries).unwrap();
            let lhs = shrink(&w.scale(c), c * lambda1, lambda2).unwrap();
            let rhs = shrink(&w, lambda1, lambda2).unwrap().scale(c);
            let scale = 1.0 + rhs.max_abs();
            prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-10 * scale);
        }

        #[test]
        fn shrink_never_expands_spectrum(
            entries in proptest::collection::vec(-5.0_f64..5.0, 12),
            lambda1 in 0.0_f64..3.0,
            lambda2 in 0.0_f64..3.0,
        ) {
            let w = DenseMatrix::from_rows(4, 3, &entries).unwrap();
            let s_in = svd(&w).unwrap().s;
            let (_, s_out) = shrink_with_spectrum(&w, lambda1, lambda2).unwrap();
            for (si, so) in s_in.iter().zip(&s_out) {
                prop_assert!(so <= si);
            }
        }
    }
}
