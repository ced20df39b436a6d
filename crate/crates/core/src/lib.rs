//! Matrix completion by calibrated spectrum elastic net regularization.
//!
//! The estimator minimizes a penalized least-squares objective over dense
//! matrices, combining a nuclear-norm penalty (spectral sparsity) with a
//! squared-Frobenius penalty (regularizes the ill-posed quadratic term when
//! few entries are observed), and then rescales the solution to undo the
//! Frobenius shrinkage. The crate provides:
//!
//! - [`matcore`]: dense matrix values, thin SVD, norms and the trace inner
//!   product;
//! - [`obsmodel`]: observation multisets with multiplicities, and seeded
//!   synthetic instance generation;
//! - [`shrinkage`]: the scaled soft-thresholding SVD prox operator and the
//!   objectives it optimizes;
//! - [`solver`]: the EM iteration (impute / shrink), calibration, and
//!   closed-form penalty selection;
//! - [`baselines`]: the spectrum Lasso and the modified estimator with the
//!   expected quadratic term;
//! - [`analysis`]: coherence and spikiness diagnostics, tangent-space
//!   projections, exact dense construction of the oracle-condition
//!   operators at desk scale, and the deterministic error-bound checker;
//! - [`bench`]: the simulation harness (penalty grids, error metrics,
//!   CSV emission, SVG plots).
//!
//! Replication sweeps are data-parallel via rayon when the `parallel`
//! feature (default) is enabled; the sequential fallback produces
//! byte-identical output.

pub mod analysis;
pub mod baselines;
pub mod bench;
pub mod matcore;
pub mod obsmodel;
pub mod par;
pub mod shrinkage;
pub mod solver;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
