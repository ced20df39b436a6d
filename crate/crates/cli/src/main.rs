//! `specnet`: penalty-grid benchmarks, single solves, and oracle-condition
//! checks for calibrated spectrum elastic net matrix completion.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use specnet_core::analysis::{self, TangentSpace};
use specnet_core::bench::{self, BenchError, ExperimentConfig, Method};
use specnet_core::obsmodel::{self, ObsError};
use specnet_core::shrinkage::PenaltyPair;
use specnet_core::solver::{self, SolverConfig, RANK_REL_TOL};

#[derive(Parser)]
#[command(name = "specnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep penalty grids for the selected estimators over seeded
    /// replications and write records.csv, summary.csv, and plot.svg.
    Bench(BenchArgs),
    /// Solve a single observation set and write the calibrated estimate.
    Solve(SolveArgs),
    /// Evaluate the deterministic error-bound conditions on a saved
    /// instance directory and print the report.
    Check(CheckArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    d1: usize,
    #[arg(long)]
    d2: usize,
    #[arg(long)]
    rank: usize,
    /// Number of observed entries (alternative to --pi0).
    #[arg(long)]
    n: Option<usize>,
    /// Observed fraction of entries (alternative to --n).
    #[arg(long)]
    pi0: Option<f64>,
    /// Noise standard deviation (alternative to --snr).
    #[arg(long)]
    sigma: Option<f64>,
    /// Signal-to-noise ratio sqrt(rank)/sigma (alternative to --sigma).
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Number of penalty levels per sweep.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    /// Comma-separated subset of enet,lasso,klt.
    #[arg(long, default_value = "enet,lasso,klt")]
    methods: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for records.csv, summary.csv, plot.svg.
    #[arg(long)]
    out: PathBuf,
    /// Grid floor as a fraction of the largest penalty level.
    #[arg(long, default_value_t = 1e-3)]
    lambda_floor: f64,
    /// Solver stopping tolerance.
    #[arg(long, default_value_t = solver::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Solver iteration cap per grid point.
    #[arg(long, default_value_t = solver::DEFAULT_MAX_ITER)]
    max_iter: usize,
}

#[derive(Args)]
struct SolveArgs {
    /// Observation CSV with header row,col,value (0-based indices).
    #[arg(long)]
    obs: PathBuf,
    /// Noise level used for closed-form penalty selection.
    #[arg(long)]
    sigma: f64,
    /// Nuclear penalty; taken from the closed form when omitted.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Frobenius penalty; taken from the closed form when omitted.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Grid rows; inferred from the largest index when omitted.
    #[arg(long)]
    d1: Option<usize>,
    /// Grid columns; inferred from the largest index when omitted.
    #[arg(long)]
    d2: Option<usize>,
    /// Where to write the calibrated estimate as CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = solver::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = solver::DEFAULT_MAX_ITER)]
    max_iter: usize,
}

#[derive(Args)]
struct CheckArgs {
    /// Instance directory holding theta.csv, observations.csv, meta.
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    lambda1: f64,
    #[arg(long)]
    lambda2: f64,
    /// Dense-operator dimension cap (d1*d2 must not exceed it).
    #[arg(long, default_value_t = analysis::DEFAULT_DIM_CAP)]
    cap: usize,
}

enum CliError {
    Config(String),
    Io(String),
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Io { .. } => CliError::Io(e.to_string()),
            BenchError::Obs(inner) => CliError::from(inner),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ObsError> for CliError {
    fn from(e: ObsError) -> Self {
        match e {
            ObsError::Io { .. } | ObsError::Parse { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<solver::SolverError> for CliError {
    fn from(e: solver::SolverError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<analysis::AnalysisError> for CliError {
    fn from(e: analysis::AnalysisError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(args) => run_bench(args),
        Command::Solve(args) => run_solve(args),
        Command::Check(args) => run_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, CliError> {
    let mut methods = Vec::new();
    for part in spec.split(',') {
        let m: Method = part
            .parse()
            .map_err(|e: BenchError| CliError::Config(e.to_string()))?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(CliError::Config("no methods selected".to_string()));
    }
    Ok(methods)
}

fn run_bench(args: BenchArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::new(args.d1, args.d2, args.rank);
    cfg.n = args.n;
    cfg.pi0 = args.pi0;
    cfg.sigma = args.sigma;
    cfg.snr = args.snr;
    cfg.reps = args.reps;
    cfg.grid_size = args.grid;
    cfg.seed = args.seed;
    cfg.methods = parse_methods(&args.methods)?;
    cfg.lambda_floor_ratio = args.lambda_floor;
    cfg.epsilon = args.epsilon;
    cfg.max_iter = args.max_iter;
    cfg.resolve()?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("create {}: {e}", args.out.display())))?;

    let records = bench::run_experiment(&cfg)?;
    let summary = bench::summarize(&records);
    let records_path = args.out.join("records.csv");
    let summary_path = args.out.join("summary.csv");
    let plot_path = args.out.join("plot.svg");
    bench::write_records_csv(&records_path, &records)?;
    bench::write_summary_csv(&summary_path, &summary)?;
    bench::write_plot_svg(&plot_path, &summary)?;

    println!("wrote {}", records_path.display());
    println!("wrote {}", summary_path.display());
    println!("wrote {}", plot_path.display());
    for method in &cfg.methods {
        if let Some(best) = summary
            .iter()
            .filter(|r| r.method == *method && r.mean_test_err.is_finite())
            .min_by(|a, b| a.mean_test_err.total_cmp(&b.mean_test_err))
        {
            println!(
                "{method}: min mean test error {:.6} at grid {} (mean rank {:.2})",
                best.mean_test_err, best.grid_index, best.mean_est_rank
            );
        }
    }
    Ok(())
}

fn run_solve(args: SolveArgs) -> Result<(), CliError> {
    if args.sigma < 0.0 {
        return Err(CliError::Config(format!(
            "sigma must be nonnegative, got {}",
            args.sigma
        )));
    }
    let obs = obsmodel::read_observations_csv(&args.obs, args.d1, args.d2)?;
    let (lambda1, lambda2) = match (args.lambda1, args.lambda2) {
        (Some(l1), Some(l2)) => (l1, l2),
        (None, None) => {
            let p = solver::select_penalties(&obs, args.sigma)?;
            (p.lambda1, p.lambda2)
        }
        (Some(l1), None) => {
            let p = solver::select_penalties(&obs, args.sigma)?;
            (l1, p.lambda2)
        }
        (None, Some(l2)) => {
            let p = solver::select_penalties(&obs, args.sigma)?;
            (p.lambda1, l2)
        }
    };
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(CliError::Config(
            "penalties must be nonnegative".to_string(),
        ));
    }

    let cfg = SolverConfig::new(lambda1, lambda2)
        .with_epsilon(args.epsilon)
        .with_max_iter(args.max_iter);
    let res = solver::two_stage_solve(&obs, &cfg)?;
    obsmodel::write_matrix_csv(&args.out, &res.theta_hat)?;

    let xi = 1.0 + lambda2 / obs.pi0();
    println!("d1={} d2={} n={} pi0={}", obs.d1(), obs.d2(), obs.n(), obs.pi0());
    println!("lambda1={lambda1} lambda2={lambda2} xi={xi}");
    println!(
        "iterations={} converged={} est_rank={}",
        res.iterations, res.converged, res.est_rank
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_check(args: CheckArgs) -> Result<(), CliError> {
    let instance = obsmodel::load_instance(&args.instance)?;
    let ts = TangentSpace::from_matrix(&instance.theta, RANK_REL_TOL)?;
    let penalties = PenaltyPair::with_pi0(args.lambda1, args.lambda2, instance.obs.pi0());
    let eps = instance.noise_matrix();
    let report =
        analysis::check_conditions_capped(&instance, &ts, &penalties, &eps, args.cap)?;
    print!("{}", report.to_key_value_string());
    Ok(())
}
