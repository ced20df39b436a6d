//! The simulation harness: seeded instance generation, penalty-grid
//! sweeps of the three estimators, training/test error metrics, CSV
//! emission, and an SVG summary plot.
//!
//! Replications are regenerated independently (one child random stream per
//! replication index) and run concurrently under the `parallel` feature;
//! records are merged by a deterministic sort key, so repeated runs of the
//! same configuration produce byte-identical CSV output.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::baselines;
use crate::matcore::{self, DenseMatrix};
use crate::obsmodel::{self, Instance, SampleMode};
use crate::par;
use crate::solver::{self, SolverConfig, SolverInit};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Obs(#[from] obsmodel::ObsError),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
    #[error(transparent)]
    Mat(#[from] matcore::MatError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> BenchError {
    BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The estimators the harness can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    /// Calibrated elastic-net estimator (nuclear + Frobenius penalties).
    Enet,
    /// Nuclear penalty only, no calibration.
    Lasso,
    /// Closed-form estimator with the expected quadratic term.
    Klt,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Enet => write!(f, "enet"),
            Method::Lasso => write!(f, "lasso"),
            Method::Klt => write!(f, "klt"),
        }
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "enet" => Ok(Method::Enet),
            "lasso" => Ok(Method::Lasso),
            "klt" => Ok(Method::Klt),
            other => Err(BenchError::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Experiment configuration. Exactly one of `n`/`pi0` and exactly one of
/// `sigma`/`snr` must be set (`snr` converts as `sigma = sqrt(r) / snr`).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub d1: usize,
    pub d2: usize,
    pub r: usize,
    pub n: Option<usize>,
    pub pi0: Option<f64>,
    pub sigma: Option<f64>,
    pub snr: Option<f64>,
    pub reps: usize,
    pub grid_size: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// The grid spans `[lambda_max * floor_ratio, lambda_max]`.
    pub lambda_floor_ratio: f64,
    pub epsilon: f64,
    pub max_iter: usize,
}

impl ExperimentConfig {
    pub fn new(d1: usize, d2: usize, r: usize) -> Self {
        Self {
            d1,
            d2,
            r,
            n: None,
            pi0: None,
            sigma: None,
            snr: None,
            reps: 1,
            grid_size: 100,
            seed: 0,
            methods: vec![Method::Enet, Method::Lasso, Method::Klt],
            lambda_floor_ratio: 1e-3,
            epsilon: solver::DEFAULT_EPSILON,
            max_iter: solver::DEFAULT_MAX_ITER,
        }
    }

    /// Resolves the `n`/`pi0` and `sigma`/`snr` alternatives and validates
    /// ranges.
    pub fn resolve(&self) -> Result<(usize, f64), BenchError> {
        let n = match (self.n, self.pi0) {
            (Some(n), None) => n,
            (None, Some(pi0)) => {
                if !(pi0 > 0.0 && pi0 <= 1.0) {
                    return Err(BenchError::Config(format!(
                        "pi0 must be in (0, 1], got {pi0}"
                    )));
                }
                ((self.d1 * self.d2) as f64 * pi0).round() as usize
            }
            (Some(_), Some(_)) => {
                return Err(BenchError::Config(
                    "give exactly one of n and pi0, not both".to_string(),
                ))
            }
            (None, None) => {
                return Err(BenchError::Config(
                    "one of n and pi0 is required".to_string(),
                ))
            }
        };
        let sigma = match (self.sigma, self.snr) {
            (Some(s), None) => {
                if s < 0.0 {
                    return Err(BenchError::Config(format!(
                        "sigma must be nonnegative, got {s}"
                    )));
                }
                s
            }
            (None, Some(snr)) => {
                if !(snr > 0.0) {
                    return Err(BenchError::Config(format!(
                        "snr must be positive, got {snr}"
                    )));
                }
                (self.r as f64).sqrt() / snr
            }
            (Some(_), Some(_)) => {
                return Err(BenchError::Config(
                    "give exactly one of sigma and snr, not both".to_string(),
                ))
            }
            (None, None) => {
                return Err(BenchError::Config(
                    "one of sigma and snr is required".to_string(),
                ))
            }
        };
        if n == 0 || n > self.d1 * self.d2 {
            return Err(BenchError::Config(format!(
                "n = {n} not in 1..={}",
                self.d1 * self.d2
            )));
        }
        if self.r < 1 || self.r > self.d1.min(self.d2) {
            return Err(BenchError::Config(format!("rank {} out of range", self.r)));
        }
        if self.reps == 0 {
            return Err(BenchError::Config("reps must be at least 1".to_string()));
        }
        if self.grid_size < 2 {
            return Err(BenchError::Config(
                "grid size must be at least 2".to_string(),
            ));
        }
        if self.methods.is_empty() {
            return Err(BenchError::Config("no methods selected".to_string()));
        }
        Ok((n, sigma))
    }
}

/// One estimator evaluation at one grid point of one replication.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub method: Method,
    pub replication: usize,
    pub grid_index: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub est_rank: usize,
    pub train_err: f64,
    pub test_err: f64,
    pub frob_err_sq_normalized: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
}

/// Header of the records CSV.
pub const RECORDS_CSV_HEADER: &str = "method,replication,grid_index,lambda1,lambda2,est_rank,\
train_err,test_err,frob_err_sq_normalized,iterations,converged,seed";

/// Header of the summary CSV.
pub const SUMMARY_CSV_HEADER: &str = "method,grid_index,mean_est_rank,mean_train_err,mean_test_err";

/// Log-spaced descending penalty levels from `||Y_raw||_S` down to
/// `||Y_raw||_S * floor_ratio`. The top level yields the zero solution for
/// every estimator; descending order lets sweeps reuse warm starts.
/// Degenerate all-zero observations collapse to the single-point grid `{0}`.
pub fn penalty_grid(
    obs: &obsmodel::ObservationSet,
    grid_size: usize,
    floor_ratio: f64,
) -> Result<Vec<f64>, BenchError> {
    if grid_size < 2 {
        return Err(BenchError::Config(
            "grid size must be at least 2".to_string(),
        ));
    }
    if !(floor_ratio > 0.0 && floor_ratio < 1.0) {
        return Err(BenchError::Config(format!(
            "floor ratio must be in (0, 1), got {floor_ratio}"
        )));
    }
    let lambda_max = matcore::norm(&obs.raw_sum_matrix(), matcore::NormKind::Spectral)?;
    if lambda_max == 0.0 {
        return Ok(vec![0.0]);
    }
    let log_max = lambda_max.ln();
    let log_min = (lambda_max * floor_ratio).ln();
    Ok((0..grid_size)
        .map(|i| {
            // Endpoints stay exact; exp(ln(x)) can drift an ulp below x,
            // which would spoil the zero solution at the top of the grid.
            if i == 0 {
                lambda_max
            } else if i == grid_size - 1 {
                lambda_max * floor_ratio
            } else {
                let t = i as f64 / (grid_size - 1) as f64;
                (log_max + t * (log_min - log_max)).exp()
            }
        })
        .collect())
}

/// Training error, test error, and dimension-normalized squared error of
/// an estimate against a no-ties instance.
#[derive(Debug, Clone, Copy)]
pub struct ErrorMetrics {
    /// `||P_Omega(theta_hat - Y)||_F^2 / ||P_Omega Y||_F^2`; `None` when
    /// the observed data is all zero.
    pub train_err: Option<f64>,
    /// `||P_Omega^perp(theta_hat - Theta)||_F^2 / ||P_Omega^perp Theta||_F^2`;
    /// `None` when the truth vanishes off the observed set (or nothing is
    /// unobserved).
    pub test_err: Option<f64>,
    /// `||theta_hat - Theta||_F^2 / (d1 d2)`.
    pub frob_err_sq_normalized: f64,
}

/// Evaluates the error ratios over the observed/unobserved index sets.
/// Requires a no-ties instance so that masking is a projection.
pub fn evaluate_errors(
    instance: &Instance,
    theta_hat: &DenseMatrix,
) -> Result<ErrorMetrics, BenchError> {
    let obs = &instance.obs;
    if obs.m_star_max() > 1 {
        return Err(BenchError::Config(
            "error metrics need a no-ties instance".to_string(),
        ));
    }
    if theta_hat.shape() != instance.theta.shape() {
        return Err(BenchError::Config(format!(
            "estimate shape {:?} does not match instance {:?}",
            theta_hat.shape(),
            instance.theta.shape()
        )));
    }
    let (d1, d2) = instance.theta.shape();

    let mut train_num = 0.0;
    let mut train_den = 0.0;
    for &(i, j, y) in obs.samples() {
        train_num += (theta_hat.get(i, j) - y).powi(2);
        train_den += y * y;
    }

    let mut test_num = 0.0;
    let mut test_den = 0.0;
    for i in 0..d1 {
        for j in 0..d2 {
            if obs.multiplicity(i, j) == 0 {
                test_num += (theta_hat.get(i, j) - instance.theta.get(i, j)).powi(2);
                test_den += instance.theta.get(i, j).powi(2);
            }
        }
    }

    let frob_err_sq_normalized =
        theta_hat.sub(&instance.theta).frobenius_norm_sq() / (d1 * d2) as f64;

    Ok(ErrorMetrics {
        train_err: (train_den > 0.0).then_some(train_num / train_den),
        test_err: (test_den > 0.0).then_some(test_num / test_den),
        frob_err_sq_normalized,
    })
}

/// The elastic-net coupling rule for the second penalty:
/// `lambda2 = lambda1 * {n / (d log d)}^{1/4} / F_hat` with
/// `F_hat = (sum_i y_i^2 / pi0)^{1/2}` (0 when `F_hat` vanishes).
pub fn enet_lambda2(obs: &obsmodel::ObservationSet, lambda1: f64) -> f64 {
    let d = (obs.d1() + obs.d2()) as f64;
    let f_hat = (obs.sum_y_squared() / obs.pi0()).sqrt();
    if f_hat > 0.0 {
        lambda1 * (obs.n() as f64 / (d * d.ln())).powf(0.25) / f_hat
    } else {
        0.0
    }
}

/// Runs one replication: regenerate the instance from its child seed and
/// sweep the penalty grid for each method, warm-starting down the grid.
pub fn run_replication(
    cfg: &ExperimentConfig,
    rep: usize,
) -> Result<Vec<MetricsRecord>, BenchError> {
    let (n, sigma) = cfg.resolve()?;
    let inst_seed = obsmodel::child_seed(cfg.seed, rep);
    let instance = obsmodel::generate_instance(
        cfg.d1,
        cfg.d2,
        cfg.r,
        n,
        sigma,
        SampleMode::UniformNoTies,
        inst_seed,
    )?;
    let obs = &instance.obs;
    let grid = penalty_grid(obs, cfg.grid_size, cfg.lambda_floor_ratio)?;

    let mut records = Vec::with_capacity(grid.len() * cfg.methods.len());
    for &method in &cfg.methods {
        let mut warm: Option<DenseMatrix> = None;
        for (grid_index, &lambda1) in grid.iter().enumerate() {
            let (theta_hat, lambda2, est_rank, iterations, converged) = match method {
                Method::Enet | Method::Lasso => {
                    let lambda2 = if method == Method::Enet {
                        enet_lambda2(obs, lambda1)
                    } else {
                        0.0
                    };
                    let mut scfg = SolverConfig::new(lambda1, lambda2)
                        .with_m_star(obs.m_star_max().max(1))
                        .with_epsilon(cfg.epsilon)
                        .with_max_iter(cfg.max_iter);
                    if let Some(w) = warm.take() {
                        scfg = scfg.with_init(SolverInit::Warm(w));
                    }
                    let res = solver::em_solve(obs, &scfg)?;
                    warm = Some(res.z_final.clone());
                    (
                        res.theta_hat,
                        lambda2,
                        res.est_rank,
                        res.iterations,
                        res.converged,
                    )
                }
                Method::Klt => {
                    let est = baselines::klt_estimator(obs, lambda1)?;
                    let est_rank = solver::estimated_rank(&est, solver::RANK_REL_TOL)?;
                    (est, 0.0, est_rank, 1, true)
                }
            };
            let errs = evaluate_errors(&instance, &theta_hat)?;
            records.push(MetricsRecord {
                method,
                replication: rep,
                grid_index,
                lambda1,
                lambda2,
                est_rank,
                train_err: errs.train_err.unwrap_or(f64::NAN),
                test_err: errs.test_err.unwrap_or(f64::NAN),
                frob_err_sq_normalized: errs.frob_err_sq_normalized,
                iterations,
                converged,
                seed: inst_seed,
            });
        }
    }
    Ok(records)
}

/// Runs every replication (concurrently under the `parallel` feature) and
/// returns the records sorted by `(method, replication, grid_index)`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>, BenchError> {
    cfg.resolve()?;
    let per_rep = par::map_indices(cfg.reps, |rep| run_replication(cfg, rep));
    let mut records = Vec::new();
    for rep in per_rep {
        records.extend(rep?);
    }
    records.sort_by(|a, b| {
        (a.method, a.replication, a.grid_index).cmp(&(b.method, b.replication, b.grid_index))
    });
    Ok(records)
}

/// Grid-point means over replications, for plotting.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: Method,
    pub grid_index: usize,
    pub mean_est_rank: f64,
    pub mean_train_err: f64,
    pub mean_test_err: f64,
}

/// Aggregates records by `(method, grid_index)`, averaging over
/// replications. NaN error entries (undefined ratios) poison their mean,
/// deliberately: they indicate a degenerate configuration.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(Method, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for rec in records {
        groups
            .entry((rec.method, rec.grid_index))
            .or_default()
            .push(rec);
    }
    groups
        .into_iter()
        .map(|((method, grid_index), rows)| {
            let k = rows.len() as f64;
            SummaryRow {
                method,
                grid_index,
                mean_est_rank: rows.iter().map(|r| r.est_rank as f64).sum::<f64>() / k,
                mean_train_err: rows.iter().map(|r| r.train_err).sum::<f64>() / k,
                mean_test_err: rows.iter().map(|r| r.test_err).sum::<f64>() / k,
            }
        })
        .collect()
}

/// Renders the records CSV with the exact header the harness contract
/// fixes.
pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * records.len() + 128);
    out.push_str(RECORDS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.replication,
            r.grid_index,
            r.lambda1,
            r.lambda2,
            r.est_rank,
            r.train_err,
            r.test_err,
            r.frob_err_sq_normalized,
            r.iterations,
            r.converged,
            r.seed
        ));
    }
    out
}

/// Renders the summary CSV.
pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::with_capacity(48 * rows.len() + 64);
    out.push_str(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.grid_index, r.mean_est_rank, r.mean_train_err, r.mean_test_err
        ));
    }
    out
}

pub fn write_records_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), BenchError> {
    fs::write(path, records_to_csv(records)).map_err(|e| io_err(path, e))
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), BenchError> {
    fs::write(path, summary_to_csv(rows)).map_err(|e| io_err(path, e))
}

/// Line chart of the summary: mean errors against mean estimated rank,
/// test error solid, training error dashed; one color per method (the
/// elastic net red, the nuclear-only path blue, the expected-quadratic
/// estimator black). Pure-text SVG, no plotting dependency.
pub fn plot_summary_svg(rows: &[SummaryRow]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const MARGIN: f64 = 56.0;

    let finite: Vec<&SummaryRow> = rows
        .iter()
        .filter(|r| {
            r.mean_est_rank.is_finite()
                && r.mean_train_err.is_finite()
                && r.mean_test_err.is_finite()
        })
        .collect();
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    if finite.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let x_max = finite
        .iter()
        .map(|r| r.mean_est_rank)
        .fold(1.0_f64, f64::max);
    let y_max = finite
        .iter()
        .map(|r| r.mean_train_err.max(r.mean_test_err))
        .fold(1e-12_f64, f64::max);
    let sx = |x: f64| MARGIN + (x / x_max) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y / y_max) * (H - 2.0 * MARGIN);

    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{m}\" y2=\"{t}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{lb}\" text-anchor=\"middle\" font-size=\"13\">estimated rank</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 16 {cy})\">error</text>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        cx = W / 2.0,
        lb = H - 16.0,
        cy = H / 2.0,
    ));

    let methods = [Method::Enet, Method::Lasso, Method::Klt];
    let colors = ["red", "blue", "black"];
    for (&method, color) in methods.iter().zip(colors) {
        let mut pts: Vec<&&SummaryRow> = finite.iter().filter(|r| r.method == method).collect();
        pts.sort_by_key(|r| r.grid_index);
        if pts.is_empty() {
            continue;
        }
        for (field, dash) in [(0, ""), (1, " stroke-dasharray=\"6,4\"")] {
            let path: Vec<String> = pts
                .iter()
                .map(|r| {
                    let y = if field == 0 {
                        r.mean_test_err
                    } else {
                        r.mean_train_err
                    };
                    format!("{:.4},{:.4}", sx(r.mean_est_rank), sy(y))
                })
                .collect();
            out.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\"{dash} points=\"{}\"/>\n",
                path.join(" ")
            ));
        }
    }
    // Legend.
    for (k, (&method, color)) in methods.iter().zip(colors).enumerate() {
        let y = MARGIN + 18.0 * k as f64;
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"{color}\"/>\n\
             <text x=\"{xt}\" y=\"{yt}\" font-size=\"12\">{method}</text>\n",
            x0 = W - MARGIN - 110.0,
            x1 = W - MARGIN - 80.0,
            xt = W - MARGIN - 74.0,
            yt = y + 4.0,
        ));
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_plot_svg(path: &Path, rows: &[SummaryRow]) -> Result<(), BenchError> {
    fs::write(path, plot_summary_svg(rows)).map_err(|e| io_err(path, e))
}
