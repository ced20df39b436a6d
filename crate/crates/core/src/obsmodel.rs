//! The observation multiset, its summary statistics, and seeded synthetic
//! instance generation.
//!
//! Observations are pairs of an entry position and a value; positions may
//! repeat (ties), so the set carries a multiplicity map. The per-entry
//! sample means live in a dense matrix with zeros at unobserved positions;
//! consumers must consult the multiplicity mask rather than the zero
//! sentinel, so zero-valued observations stay unambiguous.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::matcore::DenseMatrix;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("observation list is empty")]
    Empty,
    #[error("index ({row}, {col}) out of range for {d1}x{d2}")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        d1: usize,
        d2: usize,
    },
    #[error("non-finite observation value {value} at ({row}, {col})")]
    NonFiniteValue { row: usize, col: usize, value: f64 },
    #[error("{n} samples without ties exceed the {total} available positions")]
    TooManySamples { n: usize, total: usize },
    #[error("rank {r} not in 1..={max}")]
    InvalidRank { r: usize, max: usize },
    #[error("noise level must be nonnegative, got {0}")]
    NegativeSigma(f64),
    #[error("unknown sampling mode `{0}`")]
    UnknownMode(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ObsError {
    ObsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The multiset of observed entries `{(omega_i, y_i)}` on a `d1 x d2` grid,
/// with the multiplicity map `m_omega`, its maximum `m*`, and the sample
/// fraction `pi0 = n / (d1 d2)`.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    d1: usize,
    d2: usize,
    samples: Vec<(usize, usize, f64)>,
    mult: Vec<u32>,
    m_star_max: u32,
}

impl ObservationSet {
    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    /// Raw samples in insertion order, ties included.
    pub fn samples(&self) -> &[(usize, usize, f64)] {
        &self.samples
    }

    /// Total sample count with multiplicity.
    pub fn n(&self) -> usize {
        self.samples.len()
    }

    /// Multiplicity of observations at `(i, j)`.
    #[inline]
    pub fn multiplicity(&self, i: usize, j: usize) -> u32 {
        self.mult[i * self.d2 + j]
    }

    /// Maximum multiplicity `m*` over all entries.
    pub fn m_star_max(&self) -> u32 {
        self.m_star_max
    }

    /// Sample fraction `pi0 = n / (d1 d2)`.
    pub fn pi0(&self) -> f64 {
        self.n() as f64 / (self.d1 * self.d2) as f64
    }

    /// Sum of squared observation values, `sum_i y_i^2`.
    pub fn sum_y_squared(&self) -> f64 {
        self.samples.iter().map(|&(_, _, y)| y * y).sum()
    }

    /// The raw sum matrix `Y_raw = sum_i y_i E_{omega_i}` (ties add up).
    pub fn raw_sum_matrix(&self) -> DenseMatrix {
        let mut acc = vec![0.0; self.d1 * self.d2];
        for &(i, j, y) in &self.samples {
            acc[i * self.d2 + j] += y;
        }
        DenseMatrix::from_rows(self.d1, self.d2, &acc).expect("finite sums of finite values")
    }
}

/// Builds an [`ObservationSet`] from `(row, col, value)` triples, counting
/// exact ties into the multiplicity map.
pub fn build_observations(
    d1: usize,
    d2: usize,
    triples: &[(usize, usize, f64)],
) -> Result<ObservationSet, ObsError> {
    if triples.is_empty() {
        return Err(ObsError::Empty);
    }
    let mut mult = vec![0u32; d1 * d2];
    for &(i, j, y) in triples {
        if i >= d1 || j >= d2 {
            return Err(ObsError::IndexOutOfRange {
                row: i,
                col: j,
                d1,
                d2,
            });
        }
        if !y.is_finite() {
            return Err(ObsError::NonFiniteValue {
                row: i,
                col: j,
                value: y,
            });
        }
        mult[i * d2 + j] += 1;
    }
    let m_star_max = mult.iter().copied().max().unwrap_or(0);
    Ok(ObservationSet {
        d1,
        d2,
        samples: triples.to_vec(),
        mult,
        m_star_max,
    })
}

/// Per-entry sample means: entry `omega` holds `m_omega^{-1} sum y_i` where
/// observed and 0 where unobserved. The zero is a storage convention only;
/// the E-step consults the multiplicity mask.
pub fn ybar_obs(obs: &ObservationSet) -> DenseMatrix {
    let (d1, d2) = (obs.d1, obs.d2);
    let mut acc = vec![0.0; d1 * d2];
    for &(i, j, y) in &obs.samples {
        acc[i * d2 + j] += y;
    }
    for (k, a) in acc.iter_mut().enumerate() {
        let m = obs.mult[k];
        if m > 0 {
            *a /= m as f64;
        }
    }
    DenseMatrix::from_rows(d1, d2, &acc).expect("finite means of finite values")
}

/// How entry positions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// A uniformly distributed size-`n` subset of the grid; every position
    /// appears at most once.
    UniformNoTies,
    /// `n` iid uniform draws over the grid; positions may repeat.
    IidUniform,
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleMode::UniformNoTies => write!(f, "uniform_no_ties"),
            SampleMode::IidUniform => write!(f, "iid_uniform"),
        }
    }
}

impl FromStr for SampleMode {
    type Err = ObsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform_no_ties" => Ok(SampleMode::UniformNoTies),
            "iid_uniform" => Ok(SampleMode::IidUniform),
            other => Err(ObsError::UnknownMode(other.to_string())),
        }
    }
}

/// Draws `n` entry positions on a `d1 x d2` grid, deterministically under
/// `seed`.
pub fn sample_omegas(
    d1: usize,
    d2: usize,
    n: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<Vec<(usize, usize)>, ObsError> {
    let total = d1 * d2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SampleMode::UniformNoTies => {
            if n > total {
                return Err(ObsError::TooManySamples { n, total });
            }
            // Partial Fisher-Yates: the first n slots are a uniform subset.
            let mut idx: Vec<usize> = (0..total).collect();
            for i in 0..n {
                let j = rng.random_range(i..total);
                idx.swap(i, j);
            }
            Ok(idx[..n].iter().map(|&k| (k / d2, k % d2)).collect())
        }
        SampleMode::IidUniform => Ok((0..n)
            .map(|_| {
                let k = rng.random_range(0..total);
                (k / d2, k % d2)
            })
            .collect()),
    }
}

/// A synthetic problem instance: the ground truth, the observations drawn
/// from it, and the generation parameters needed to reproduce both.
#[derive(Debug, Clone)]
pub struct Instance {
    pub theta: DenseMatrix,
    pub obs: ObservationSet,
    pub noise_sigma: f64,
    pub seed: u64,
    pub rank: usize,
    pub mode: SampleMode,
}

impl Instance {
    /// Signal-to-noise ratio `sqrt(r) / sigma`; infinite in the noiseless
    /// case.
    pub fn snr(&self) -> f64 {
        if self.noise_sigma == 0.0 {
            f64::INFINITY
        } else {
            (self.rank as f64).sqrt() / self.noise_sigma
        }
    }

    /// The noise matrix `sum_i eps_i E_{omega_i}` with `eps_i = y_i -
    /// theta_{omega_i}` (ties add up).
    pub fn noise_matrix(&self) -> DenseMatrix {
        let (d1, d2) = self.theta.shape();
        let mut acc = vec![0.0; d1 * d2];
        for &(i, j, y) in self.obs.samples() {
            acc[i * d2 + j] += y - self.theta.get(i, j);
        }
        DenseMatrix::from_rows(d1, d2, &acc).expect("finite")
    }
}

/// Generates an instance with `Theta = U V^T` for `U: d1 x r`, `V: d2 x r`
/// filled with independent standard normals, positions drawn per `mode`,
/// and `y_i = Theta_{omega_i} + sigma * N(0, 1)`.
///
/// The seeded stream is consumed in a fixed order (U row-major, V
/// row-major, a sub-seed for the positions, then the noise), so instances
/// are bit-reproducible from `(parameters, seed)`.
pub fn generate_instance(
    d1: usize,
    d2: usize,
    r: usize,
    n: usize,
    sigma: f64,
    mode: SampleMode,
    seed: u64,
) -> Result<Instance, ObsError> {
    let max_rank = d1.min(d2);
    if r < 1 || r > max_rank {
        return Err(ObsError::InvalidRank { r, max: max_rank });
    }
    if sigma < 0.0 {
        return Err(ObsError::NegativeSigma(sigma));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut u = vec![0.0; d1 * r];
    for v in u.iter_mut() {
        *v = normal(&mut rng);
    }
    let mut v = vec![0.0; d2 * r];
    for w in v.iter_mut() {
        *w = normal(&mut rng);
    }
    let u = DenseMatrix::from_rows(d1, r, &u).expect("finite normals");
    let v = DenseMatrix::from_rows(d2, r, &v).expect("finite normals");
    let theta = u.matmul(&v.transpose());

    let omega_seed = rng.next_u64();
    let omegas = sample_omegas(d1, d2, n, mode, omega_seed)?;

    let triples: Vec<(usize, usize, f64)> = omegas
        .into_iter()
        .map(|(i, j)| {
            let eps = if sigma > 0.0 {
                sigma * normal(&mut rng)
            } else {
                0.0
            };
            (i, j, theta.get(i, j) + eps)
        })
        .collect();

    let obs = build_observations(d1, d2, &triples)?;
    Ok(Instance {
        theta,
        obs,
        noise_sigma: sigma,
        seed,
        rank: r,
        mode,
    })
}

/// Derives the instance seed for replication `rep` from the experiment
/// seed: one ChaCha stream per replication index, so replications can run
/// concurrently and still reproduce bit-identically.
pub fn child_seed(seed: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng.next_u64()
}

// --- CSV / directory serialization -----------------------------------------

/// Header of the observation CSV format.
pub const OBS_CSV_HEADER: &str = "row,col,value";

/// Writes observations as CSV with header `row,col,value`, 0-based indices.
pub fn write_observations_csv(path: &Path, obs: &ObservationSet) -> Result<(), ObsError> {
    let mut out = String::with_capacity(16 * obs.n() + 16);
    out.push_str(OBS_CSV_HEADER);
    out.push('\n');
    for &(i, j, y) in obs.samples() {
        out.push_str(&format!("{i},{j},{y}\n"));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads observations from CSV. Dimensions default to the smallest grid
/// containing every index; pass explicit `d1`/`d2` to embed in a larger one.
pub fn read_observations_csv(
    path: &Path,
    d1: Option<usize>,
    d2: Option<usize>,
) -> Result<ObservationSet, ObsError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 && line == OBS_CSV_HEADER {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |field: Option<&str>, what: &str| -> Result<String, ObsError> {
            field.map(str::to_string).ok_or_else(|| ObsError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("missing {what}"),
            })
        };
        let bad = |msg: String| ObsError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let i: usize = parse(parts.next(), "row")?
            .parse()
            .map_err(|e| bad(format!("row: {e}")))?;
        let j: usize = parse(parts.next(), "col")?
            .parse()
            .map_err(|e| bad(format!("col: {e}")))?;
        let y: f64 = parse(parts.next(), "value")?
            .parse()
            .map_err(|e| bad(format!("value: {e}")))?;
        triples.push((i, j, y));
    }
    if triples.is_empty() {
        return Err(ObsError::Empty);
    }
    let min_d1 = triples.iter().map(|t| t.0).max().unwrap() + 1;
    let min_d2 = triples.iter().map(|t| t.1).max().unwrap() + 1;
    build_observations(d1.unwrap_or(min_d1).max(min_d1), d2.unwrap_or(min_d2).max(min_d2), &triples)
}

/// Writes a dense matrix as plain CSV: one line per row.
pub fn write_matrix_csv(path: &Path, m: &DenseMatrix) -> Result<(), ObsError> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|j| format!("{}", m.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads a dense matrix from plain CSV.
pub fn read_matrix_csv(path: &Path) -> Result<DenseMatrix, ObsError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| ObsError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    if rows.is_empty() {
        return Err(ObsError::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "empty matrix".to_string(),
        });
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(ObsError::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "ragged rows".to_string(),
        });
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    DenseMatrix::from_rows(flat.len() / cols, cols, &flat).map_err(|e| ObsError::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

/// Saves an instance as a directory of `theta.csv`, `observations.csv`,
/// and a `meta` file of `key=value` lines.
pub fn save_instance(dir: &Path, inst: &Instance) -> Result<(), ObsError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_matrix_csv(&dir.join("theta.csv"), &inst.theta)?;
    write_observations_csv(&dir.join("observations.csv"), &inst.obs)?;
    let meta_path = dir.join("meta");
    let mut f = fs::File::create(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    write!(
        f,
        "d1={}\nd2={}\nr={}\nn={}\nsigma={}\nseed={}\nmode={}\n",
        inst.theta.rows(),
        inst.theta.cols(),
        inst.rank,
        inst.obs.n(),
        inst.noise_sigma,
        inst.seed,
        inst.mode
    )
    .map_err(|e| io_err(&meta_path, e))
}

/// Loads an instance saved by [`save_instance`].
pub fn load_instance(dir: &Path) -> Result<Instance, ObsError> {
    let meta_path = dir.join("meta");
    let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let mut kv = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ObsError::Parse {
            path: meta_path.display().to_string(),
            line: lineno + 1,
            msg: "expected key=value".to_string(),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<&String, ObsError> {
        kv.get(key).ok_or_else(|| ObsError::Parse {
            path: meta_path.display().to_string(),
            line: 0,
            msg: format!("missing key `{key}`"),
        })
    };
    let parse_err = |key: &str, e: String| ObsError::Parse {
        path: meta_path.display().to_string(),
        line: 0,
        msg: format!("{key}: {e}"),
    };

    let d1: usize = get("d1")?.parse().map_err(|e: std::num::ParseIntError| parse_err("d1", e.to_string()))?;
    let d2: usize = get("d2")?.parse().map_err(|e: std::num::ParseIntError| parse_err("d2", e.to_string()))?;
    let rank: usize = get("r")?.parse().map_err(|e: std::num::ParseIntError| parse_err("r", e.to_string()))?;
    let sigma: f64 = get("sigma")?.parse().map_err(|e: std::num::ParseFloatError| parse_err("sigma", e.to_string()))?;
    let seed: u64 = get("seed")?.parse().map_err(|e: std::num::ParseIntError| parse_err("seed", e.to_string()))?;
    let mode: SampleMode = get("mode")?.parse()?;

    let theta = read_matrix_csv(&dir.join("theta.csv"))?;
    let obs = read_observations_csv(&dir.join("observations.csv"), Some(d1), Some(d2))?;
    Ok(Instance {
        theta,
        obs,
        noise_sigma: sigma,
        seed,
        rank,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::svd;

    #[test]
    fn multiplicity_counts_ties() {
        let obs = build_observations(2, 2, &[(0, 1, 2.0), (0, 1, 4.0), (1, 0, 7.0)]).unwrap();
        assert_eq!(obs.multiplicity(0, 1), 2);
        assert_eq!(obs.m_star_max(), 2);
        assert_eq!(obs.n(), 3);
    }

    #[test]
    fn full_grid_has_pi0_one() {
        let obs = build_observations(
            2,
            2,
            &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 1, 4.0)],
        )
        .unwrap();
        assert_eq!(obs.pi0(), 1.0);
        assert_eq!(obs.m_star_max(), 1);
    }

    #[test]
    fn pi0_is_exact_integer_arithmetic() {
        let obs = build_observations(10, 10, &[(0, 0, 1.0), (3, 4, 2.0), (9, 9, 3.0)]).unwrap();
        assert_eq!(obs.pi0(), 0.03);
        assert_eq!(obs.pi0() * 100.0, obs.n() as f64);
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(matches!(build_observations(2, 2, &[]), Err(ObsError::Empty)));
        assert!(matches!(
            build_observations(2, 2, &[(2, 0, 1.0)]),
            Err(ObsError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            build_observations(2, 2, &[(0, 0, f64::NAN)]),
            Err(ObsError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn ybar_averages_ties() {
        let obs = build_observations(2, 2, &[(0, 1, 2.0), (0, 1, 4.0)]).unwrap();
        let yb = ybar_obs(&obs);
        assert_eq!(yb.get(0, 1), 3.0);
        assert_eq!(yb.get(0, 0), 0.0); // unobserved convention
        assert_eq!(yb.get(1, 1), 0.0);
    }

    #[test]
    fn ybar_of_untied_input_is_raw_values() {
        let obs = build_observations(2, 2, &[(0, 0, -1.5), (1, 1, 0.0)]).unwrap();
        let yb = ybar_obs(&obs);
        assert_eq!(yb.get(0, 0), -1.5);
        assert_eq!(yb.get(1, 1), 0.0);
        // A zero-valued observation is distinguishable via the mask.
        assert_eq!(obs.multiplicity(1, 1), 1);
        assert_eq!(obs.multiplicity(0, 1), 0);
    }

    #[test]
    fn ybar_mean_unchanged_by_duplicated_identical_values() {
        let once = build_observations(2, 2, &[(0, 0, 5.0)]).unwrap();
        let twice = build_observations(2, 2, &[(0, 0, 5.0), (0, 0, 5.0)]).unwrap();
        assert_eq!(ybar_obs(&once).get(0, 0), ybar_obs(&twice).get(0, 0));
    }

    #[test]
    fn no_ties_mode_covers_grid_exactly_once() {
        let omegas = sample_omegas(3, 4, 12, SampleMode::UniformNoTies, 5).unwrap();
        let mut seen = vec![false; 12];
        for (i, j) in omegas {
            assert!(!seen[i * 4 + j]);
            seen[i * 4 + j] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn no_ties_mode_never_repeats() {
        for seed in 0..20 {
            let omegas = sample_omegas(5, 7, 20, SampleMode::UniformNoTies, seed).unwrap();
            let mut uniq: Vec<_> = omegas.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), omegas.len());
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        for mode in [SampleMode::UniformNoTies, SampleMode::IidUniform] {
            let a = sample_omegas(6, 6, 18, mode, 42).unwrap();
            let b = sample_omegas(6, 6, 18, mode, 42).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn no_ties_rejects_oversampling() {
        assert!(matches!(
            sample_omegas(2, 2, 5, SampleMode::UniformNoTies, 0),
            Err(ObsError::TooManySamples { n: 5, total: 4 })
        ));
    }

    #[test]
    fn iid_mode_frequencies_concentrate() {
        // 10^4 draws on a 10x10 grid: each empirical frequency within
        // 5 sigma of 1/100, sigma = sqrt(p(1-p)/n).
        let n = 10_000;
        let omegas = sample_omegas(10, 10, n, SampleMode::IidUniform, 99).unwrap();
        let mut counts = vec![0usize; 100];
        for (i, j) in omegas {
            counts[i * 10 + j] += 1;
        }
        let p = 0.01;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - p).abs() <= 5.0 * sigma,
                "frequency {freq} too far from {p}"
            );
        }
    }

    #[test]
    fn noiseless_instance_observes_theta_exactly() {
        let inst = generate_instance(4, 5, 2, 10, 0.0, SampleMode::UniformNoTies, 3).unwrap();
        for &(i, j, y) in inst.obs.samples() {
            assert_eq!(y, inst.theta.get(i, j));
        }
        assert_eq!(inst.snr(), f64::INFINITY);
    }

    #[test]
    fn instance_rank_matches_request() {
        for seed in 0..20 {
            let inst = generate_instance(6, 5, 2, 10, 0.1, SampleMode::IidUniform, seed).unwrap();
            let f = svd(&inst.theta).unwrap();
            let rank = f.s.iter().filter(|&&s| s > 1e-8 * f.s[0]).count();
            assert_eq!(rank, 2, "seed {seed}");
        }
    }

    #[test]
    fn theta_frobenius_matches_expectation() {
        // E ||Theta||_F^2 = d1 d2 r; the Monte-Carlo mean over 200 seeds
        // should land within 10% for d1 = d2 = 20, r = 2.
        let (d1, d2, r) = (20, 20, 2);
        let mut mean = 0.0;
        let reps = 200;
        for seed in 0..reps {
            let inst =
                generate_instance(d1, d2, r, 1, 0.0, SampleMode::UniformNoTies, seed).unwrap();
            mean += inst.theta.frobenius_norm_sq() / reps as f64;
        }
        let expect = (d1 * d2 * r) as f64;
        assert!(
            (mean - expect).abs() < 0.1 * expect,
            "mean {mean} vs {expect}"
        );
    }

    #[test]
    fn instance_generation_is_reproducible() {
        let a = generate_instance(5, 4, 2, 12, 0.3, SampleMode::IidUniform, 17).unwrap();
        let b = generate_instance(5, 4, 2, 12, 0.3, SampleMode::IidUniform, 17).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.obs.samples(), b.obs.samples());
    }

    #[test]
    fn child_seeds_differ_across_replications() {
        let seeds: Vec<u64> = (0..50).map(|rep| child_seed(7, rep)).collect();
        let mut uniq = seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), seeds.len());
        assert_eq!(child_seed(7, 3), seeds[3]);
    }

    #[test]
    fn invalid_rank_is_rejected() {
        assert!(matches!(
            generate_instance(3, 4, 0, 5, 0.1, SampleMode::IidUniform, 0),
            Err(ObsError::InvalidRank { .. })
        ));
        assert!(matches!(
            generate_instance(3, 4, 4, 5, 0.1, SampleMode::IidUniform, 0),
            Err(ObsError::InvalidRank { .. })
        ));
    }

    #[test]
    fn instance_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let inst = generate_instance(4, 3, 1, 8, 0.2, SampleMode::IidUniform, 11).unwrap();
        save_instance(dir.path(), &inst).unwrap();
        let back = load_instance(dir.path()).unwrap();
        assert_eq!(back.theta, inst.theta);
        assert_eq!(back.obs.samples(), inst.obs.samples());
        assert_eq!(back.noise_sigma, inst.noise_sigma);
        assert_eq!(back.seed, inst.seed);
        assert_eq!(back.rank, inst.rank);
        assert_eq!(back.mode, inst.mode);
    }

    #[test]
    fn observation_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let obs = build_observations(3, 3, &[(0, 2, 1.25), (2, 0, -4.0), (0, 2, 1.25)]).unwrap();
        write_observations_csv(&path, &obs).unwrap();
        let back = read_observations_csv(&path, Some(3), Some(3)).unwrap();
        assert_eq!(back.samples(), obs.samples());
        assert_eq!(back.multiplicity(0, 2), 2);
    }

    #[test]
    fn noise_matrix_sums_residuals() {
        let inst = generate_instance(4, 4, 1, 20, 0.5, SampleMode::IidUniform, 23).unwrap();
        let eps = inst.noise_matrix();
        let raw = inst.obs.raw_sum_matrix();
        // Y_raw = H Theta + eps, where H is the multiplicity mask.
        for i in 0..4 {
            for j in 0..4 {
                let m = inst.obs.multiplicity(i, j) as f64;
                let expect = raw.get(i, j) - m * inst.theta.get(i, j);
                assert!((eps.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }
}
