//! Synthetic recovery problems, trial execution, phase grids, recovery
//! tables and the sparse kernel-regression benchmark.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{ls_solve, Dictionary};
use crate::sbl::{fsbl, rmp_sigma, SblOptions};
use crate::stepwise::{
    backward_regression, foba, forward_regression, omp, rmp0, StopRule, FOBA_DEFAULT_NU,
};

/// Smallest noise level handed to the SBL solvers, relative to `‖y‖`. Keeps
/// `σ > 0` when the configured tolerance is zero.
pub const SIGMA_FLOOR: f64 = 1e-6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a sub-stream identified by `path`, independent of evaluation order.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(master), |h, &p| splitmix(h ^ splitmix(p)))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check_dims(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::BadArity(format!(
            "dimensions must be positive, got {n}x{m}"
        )));
    }
    Ok(())
}

/// I.i.d. standard normal entries with unit-norm columns.
pub fn gen_gaussian_dictionary(n: usize, m: usize, seed: u64) -> Result<Dictionary> {
    check_dims(n, m)?;
    let mut rng = rng(seed);
    let data = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
    Ok(Dictionary::normalize(data)?.0)
}

/// `Φ = Σ_{p=1}^{P} p⁻² u_p v_pᵀ` with standard normal `u_p`, `v_p`, then
/// normalized columns. Small `P` gives highly coherent columns.
pub fn gen_correlated_dictionary(n: usize, m: usize, p: usize, seed: u64) -> Result<Dictionary> {
    check_dims(n, m)?;
    if p == 0 {
        return Err(Error::BadArity("term count must be at least 1".into()));
    }
    let mut rng = rng(seed);
    let mut data = DMatrix::zeros(n, m);
    for term in 1..=p {
        let u = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let v = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        data.ger(1.0 / (term * term) as f64, &u, &v, 1.0);
    }
    Ok(Dictionary::normalize(data)?.0)
}

/// Uniformly random `k`-subset with independent ±1 entries. The support is
/// returned sorted.
pub fn gen_sparse_signal(m: usize, k: usize, seed: u64) -> Result<(DVector<f64>, Vec<usize>)> {
    if k == 0 || k > m {
        return Err(Error::BadArity(format!(
            "sparsity must lie in 1..={m}, got {k}"
        )));
    }
    let mut rng = rng(seed);
    let mut support = sample(&mut rng, m, k).into_vec();
    support.sort_unstable();
    let mut x = DVector::zeros(m);
    for &i in &support {
        x[i] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    }
    Ok((x, support))
}

/// Uniform direction on the sphere of the given radius.
pub fn gen_noise(n: usize, radius: f64, seed: u64) -> Result<DVector<f64>> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::BadArity(format!(
            "noise radius must be finite and >= 0, got {radius}"
        )));
    }
    if radius == 0.0 || n == 0 {
        return Ok(DVector::zeros(n));
    }
    let mut rng = rng(seed);
    loop {
        let e: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let norm = e.norm();
        if norm > 0.0 {
            return Ok(e * (radius / norm));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatrixKind {
    Gaussian,
    Correlated,
}

impl MatrixKind {
    pub fn id(self) -> &'static str {
        match self {
            MatrixKind::Gaussian => "gaussian",
            MatrixKind::Correlated => "correlated",
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(MatrixKind::Gaussian),
            "correlated" => Ok(MatrixKind::Correlated),
            _ => Err(Error::BadArity(format!(
                "unknown matrix kind `{s}` (expected gaussian or correlated)"
            ))),
        }
    }
}

/// Size, sparsity and noise of a synthetic instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSpec {
    pub kind: MatrixKind,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub noise: f64,
    /// Term count of the correlated generator; `None` means `n`.
    pub terms: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RecoveryProblem {
    pub dict: Dictionary,
    pub y: DVector<f64>,
    pub x_true: DVector<f64>,
    pub support_true: Vec<usize>,
    pub noise: DVector<f64>,
    pub seed: u64,
    pub kind: MatrixKind,
}

impl RecoveryProblem {
    /// `y = Φ x_true + ε` with every component drawn from its own sub-stream
    /// of `seed`.
    pub fn generate(spec: &ProblemSpec, seed: u64) -> Result<Self> {
        let dict = match spec.kind {
            MatrixKind::Gaussian => {
                gen_gaussian_dictionary(spec.n, spec.m, derive_seed(seed, &[1]))?
            }
            MatrixKind::Correlated => gen_correlated_dictionary(
                spec.n,
                spec.m,
                spec.terms.unwrap_or(spec.n),
                derive_seed(seed, &[1]),
            )?,
        };
        let (x_true, support_true) = gen_sparse_signal(spec.m, spec.k, derive_seed(seed, &[2]))?;
        let noise = gen_noise(spec.n, spec.noise, derive_seed(seed, &[3]))?;
        let y = dict.matrix() * &x_true + &noise;
        Ok(Self {
            dict,
            y,
            x_true,
            support_true,
            noise,
            seed,
            kind: spec.kind,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Omp,
    Fr,
    Br,
    Rmp0,
    Rmp0Plus,
    Foba,
    Fsbl,
    RmpSigma,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Omp,
        Algorithm::Fr,
        Algorithm::Br,
        Algorithm::Rmp0,
        Algorithm::Rmp0Plus,
        Algorithm::Foba,
        Algorithm::Fsbl,
        Algorithm::RmpSigma,
    ];

    /// Column order of the recovery tables.
    pub const TABLE: [Algorithm; 7] = [
        Algorithm::Omp,
        Algorithm::Fr,
        Algorithm::Foba,
        Algorithm::Rmp0,
        Algorithm::Rmp0Plus,
        Algorithm::Fsbl,
        Algorithm::RmpSigma,
    ];

    pub const KERNEL: [Algorithm; 6] = [
        Algorithm::Fr,
        Algorithm::Foba,
        Algorithm::Rmp0,
        Algorithm::Rmp0Plus,
        Algorithm::Fsbl,
        Algorithm::RmpSigma,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Algorithm::Omp => "omp",
            Algorithm::Fr => "fr",
            Algorithm::Br => "br",
            Algorithm::Rmp0 => "rmp0",
            Algorithm::Rmp0Plus => "rmp0_plus",
            Algorithm::Foba => "foba",
            Algorithm::Fsbl => "fsbl",
            Algorithm::RmpSigma => "rmp_sigma",
        }
    }

    pub fn is_sbl(self) -> bool {
        matches!(self, Algorithm::Fsbl | Algorithm::RmpSigma)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Algorithm::ALL.iter().map(|a| a.id()).collect();
                Error::BadArity(format!(
                    "unknown algorithm `{s}` (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

/// Tunables shared by all trials of an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialParams {
    /// `δ = multiplier · ‖ε‖`.
    pub delta_multiplier: f64,
    pub foba_nu: f64,
    pub sbl: SblOptions,
}

impl Default for TrialParams {
    fn default() -> Self {
        Self {
            delta_multiplier: 2.0,
            foba_nu: FOBA_DEFAULT_NU,
            sbl: SblOptions::default(),
        }
    }
}

/// Selected support and, for SBL methods, the posterior mean.
#[derive(Debug, Clone)]
pub struct Selection {
    pub support: Vec<usize>,
    pub coefficients: Option<DVector<f64>>,
    /// Stepwise iterations, or coordinate moves for SBL methods.
    pub iterations: usize,
    pub converged: bool,
}

/// Runs one algorithm with tolerance `delta` interpreted per algorithm:
/// a residual-norm target for OMP and FR, a marginal-improvement bound for
/// BR, RMP_0 and FoBa, and the noise level `σ = δ` for the SBL methods.
pub fn select(
    algorithm: Algorithm,
    dict: &Dictionary,
    y: &DVector<f64>,
    delta: f64,
    params: &TrialParams,
) -> Result<Selection> {
    let stepwise = |path: crate::stepwise::SelectionPath| Selection {
        support: path.support,
        coefficients: None,
        iterations: path.iterations,
        converged: true,
    };
    let sigma = delta.max(SIGMA_FLOOR * y.norm()).max(f64::MIN_POSITIVE);
    Ok(match algorithm {
        Algorithm::Omp => stepwise(omp(dict, y, StopRule::ResidualThreshold(delta))?),
        Algorithm::Fr => stepwise(forward_regression(
            dict,
            y,
            StopRule::ResidualThreshold(delta),
        )?),
        Algorithm::Br => stepwise(backward_regression(
            dict,
            y,
            StopRule::MarginalImprovement(delta),
        )?),
        Algorithm::Rmp0 => stepwise(rmp0(dict, y, delta, false)?),
        Algorithm::Rmp0Plus => stepwise(rmp0(dict, y, delta, true)?),
        Algorithm::Foba => stepwise(foba(dict, y, delta, params.foba_nu)?),
        Algorithm::Fsbl | Algorithm::RmpSigma => {
            let fit = if algorithm == Algorithm::Fsbl {
                fsbl(dict, y, sigma, params.sbl)?
            } else {
                rmp_sigma(dict, y, sigma, params.sbl)?
            };
            Selection {
                support: fit.path.support.clone(),
                coefficients: Some(fit.coefficients),
                iterations: fit.moves,
                converged: fit.converged,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub algorithm: Algorithm,
    pub recovered: Vec<usize>,
    pub exact_recovery: bool,
    /// Least-squares residual norm on the recovered support.
    pub residual_norm: f64,
    pub wall_time_ns: u64,
    pub seed: u64,
    /// Solver error, recorded as a failed trial.
    pub error: Option<String>,
}

pub fn run_trial(
    problem: &RecoveryProblem,
    algorithm: Algorithm,
    params: &TrialParams,
) -> TrialResult {
    let delta = params.delta_multiplier * problem.noise.norm();
    let start = Instant::now();
    let outcome = select(algorithm, &problem.dict, &problem.y, delta, params);
    let wall_time_ns = start.elapsed().as_nanos() as u64;
    match outcome {
        Ok(sel) => {
            let residual_norm = ls_solve(&problem.dict, &sel.support, &problem.y)
                .map(|(_, r)| r.norm())
                .unwrap_or(f64::NAN);
            TrialResult {
                algorithm,
                exact_recovery: sel.support == problem.support_true,
                recovered: sel.support,
                residual_norm,
                wall_time_ns,
                seed: problem.seed,
                error: None,
            }
        }
        Err(e) => TrialResult {
            algorithm,
            recovered: Vec::new(),
            exact_recovery: false,
            residual_norm: f64::NAN,
            wall_time_ns,
            seed: problem.seed,
            error: Some(e.to_string()),
        },
    }
}

/// `1.96 · sqrt(p(1 − p)/N)`.
pub fn half_width(p: f64, trials: usize) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    1.96 * (p * (1.0 - p) / trials as f64).sqrt()
}

/// One trial of one algorithm within a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub experiment_id: String,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub trial: usize,
    pub result: TrialResult,
}

/// Runs `trials` problems for each spec and every algorithm on each problem.
/// Results come back in `(spec, trial, algorithm)` order whatever the thread
/// count.
fn run_batch(
    specs: &[(String, ProblemSpec)],
    trials: usize,
    algorithms: &[Algorithm],
    params: &TrialParams,
    seed: u64,
) -> Vec<TrialRecord> {
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..trials).map(move |t| (s, t)))
        .collect();
    jobs.par_iter()
        .map(|&(s, t)| {
            let (id, spec) = &specs[s];
            let problem_seed = derive_seed(seed, &[s as u64, t as u64]);
            let results: Vec<TrialResult> = match RecoveryProblem::generate(spec, problem_seed) {
                Ok(problem) => algorithms
                    .iter()
                    .map(|&a| run_trial(&problem, a, params))
                    .collect(),
                Err(e) => algorithms
                    .iter()
                    .map(|&a| TrialResult {
                        algorithm: a,
                        recovered: Vec::new(),
                        exact_recovery: false,
                        residual_norm: f64::NAN,
                        wall_time_ns: 0,
                        seed: problem_seed,
                        error: Some(e.to_string()),
                    })
                    .collect(),
            };
            results
                .into_iter()
                .map(|result| TrialRecord {
                    experiment_id: id.clone(),
                    n: spec.n,
                    m: spec.m,
                    k: spec.k,
                    trial: t,
                    result,
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn frequency(records: &[TrialRecord], id: &str, algorithm: Algorithm) -> (f64, usize) {
    let (hits, total) = records
        .iter()
        .filter(|r| r.experiment_id == id && r.result.algorithm == algorithm)
        .fold((0usize, 0usize), |(h, t), r| {
            (h + r.result.exact_recovery as usize, t + 1)
        });
    if total == 0 {
        (0.0, 0)
    } else {
        (hits as f64 / total as f64, total)
    }
}

fn check_algorithms(algorithms: &[Algorithm]) -> Result<()> {
    if algorithms.is_empty() {
        return Err(Error::BadArity("at least one algorithm is required".into()));
    }
    Ok(())
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::BadArity("trial count must be at least 1".into()));
    }
    Ok(())
}

fn check_noise(noise: f64) -> Result<()> {
    if noise >= 0.0 && noise.is_finite() {
        Ok(())
    } else {
        Err(Error::BadArity(format!(
            "noise radius must be finite and >= 0, got {noise}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub kind: MatrixKind,
    pub m: usize,
    pub n_ratios: Vec<f64>,
    pub k_ratios: Vec<f64>,
    pub trials: usize,
    pub noise: f64,
    pub algorithms: Vec<Algorithm>,
    pub params: TrialParams,
    pub terms: Option<usize>,
    pub seed: u64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        Self {
            kind: MatrixKind::Gaussian,
            m: 128,
            n_ratios: grid.clone(),
            k_ratios: grid,
            trials: 256,
            noise: 1e-2,
            algorithms: vec![Algorithm::Fr, Algorithm::Rmp0, Algorithm::RmpSigma],
            params: TrialParams::default(),
            terms: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCell {
    pub n_ratio: f64,
    pub k_ratio: f64,
    pub algorithm: Algorithm,
    pub n: usize,
    pub k: usize,
    pub frequency: f64,
    pub half_width: f64,
    /// Zero for cells skipped because `k` is outside `1..=n`.
    pub trials: usize,
}

/// `n = round(ρ_n m)`, `k = ⌈ρ_k ρ_n m⌉`.
pub fn phase_cell_size(m: usize, n_ratio: f64, k_ratio: f64) -> (usize, usize) {
    let n = (n_ratio * m as f64).round() as usize;
    // Guard against products such as 0.3 · 0.6 · 128 landing a hair above an integer.
    let k = (k_ratio * n_ratio * m as f64 - 1e-9).ceil().max(0.0) as usize;
    (n, k)
}

/// Recovery frequency per `(n/m, k/n)` cell and algorithm. Cells are
/// ordered by `n_ratio`, then `k_ratio`, then algorithm as configured.
pub fn phase_grid(config: &PhaseConfig) -> Result<Vec<PhaseCell>> {
    check_algorithms(&config.algorithms)?;
    check_trials(config.trials)?;
    check_noise(config.noise)?;
    if config.n_ratios.is_empty() || config.k_ratios.is_empty() {
        return Err(Error::BadArity("ratio grids must be non-empty".into()));
    }
    let in_range = |r: &f64| *r > 0.0 && *r <= 1.0;
    if !config.n_ratios.iter().all(in_range) || !config.k_ratios.iter().all(in_range) {
        return Err(Error::BadArity("ratios must lie in (0, 1]".into()));
    }
    let mut specs = Vec::new();
    let mut cells = Vec::new();
    for (ni, &n_ratio) in config.n_ratios.iter().enumerate() {
        for (ki, &k_ratio) in config.k_ratios.iter().enumerate() {
            let (n, k) = phase_cell_size(config.m, n_ratio, k_ratio);
            let id = format!("phase-{ni}-{ki}");
            let runnable = n >= 1 && k >= 1 && k <= n;
            if runnable {
                specs.push((
                    id.clone(),
                    ProblemSpec {
                        kind: config.kind,
                        n,
                        m: config.m,
                        k,
                        noise: config.noise,
                        terms: config.terms,
                    },
                ));
            }
            cells.push((id, n_ratio, k_ratio, n, k, runnable));
        }
    }
    // Seeds depend on the cell position, not on which cells were skipped.
    let records = run_cells(&specs, config);
    let mut out = Vec::new();
    for (id, n_ratio, k_ratio, n, k, runnable) in cells {
        for &algorithm in &config.algorithms {
            let (frequency, trials) = if runnable {
                frequency(&records, &id, algorithm)
            } else {
                (0.0, 0)
            };
            out.push(PhaseCell {
                n_ratio,
                k_ratio,
                algorithm,
                n,
                k,
                frequency,
                half_width: half_width(frequency, trials),
                trials,
            });
        }
    }
    Ok(out)
}

fn run_cells(specs: &[(String, ProblemSpec)], config: &PhaseConfig) -> Vec<TrialRecord> {
    // Each cell gets its own master seed derived from its grid id, so
    // skipping cells never shifts another cell's problems.
    specs
        .iter()
        .flat_map(|(id, spec)| {
            let cell_seed = derive_seed(config.seed, &id_hash(id));
            run_batch(
                std::slice::from_ref(&(id.clone(), *spec)),
                config.trials,
                &config.algorithms,
                &config.params,
                cell_seed,
            )
        })
        .collect()
}

fn id_hash(id: &str) -> Vec<u64> {
    id.bytes().map(u64::from).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableConfig {
    pub kind: MatrixKind,
    pub n: usize,
    pub m: usize,
    pub ks: Vec<usize>,
    pub trials: usize,
    pub noise: f64,
    pub algorithms: Vec<Algorithm>,
    pub params: TrialParams,
    pub terms: Option<usize>,
    pub seed: u64,
}

impl TableConfig {
    /// Uncorrelated features: Gaussian 64×128, k ∈ {12, 16, 20, 24}.
    pub fn table1() -> Self {
        Self {
            kind: MatrixKind::Gaussian,
            n: 64,
            m: 128,
            ks: vec![12, 16, 20, 24],
            trials: 1024,
            noise: 1e-2,
            algorithms: Algorithm::TABLE.to_vec(),
            params: TrialParams::default(),
            terms: None,
            seed: 0,
        }
    }

    /// Correlated features: 64×128, k ∈ {2, 3, 4, 5}.
    pub fn table2() -> Self {
        Self {
            kind: MatrixKind::Correlated,
            ks: vec![2, 3, 4, 5],
            ..Self::table1()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub algorithm: Algorithm,
    pub k: usize,
    pub frequency: f64,
    pub half_width: f64,
    pub trials: usize,
}

/// Per-trial records of a table run; every algorithm sees the same problems.
pub fn table_trials(config: &TableConfig) -> Result<Vec<TrialRecord>> {
    check_algorithms(&config.algorithms)?;
    check_trials(config.trials)?;
    check_noise(config.noise)?;
    if config.ks.is_empty() {
        return Err(Error::BadArity("k list must be non-empty".into()));
    }
    if let Some(&k) = config.ks.iter().find(|&&k| k == 0 || k > config.m) {
        return Err(Error::BadArity(format!(
            "k must lie in 1..={}, got {k}",
            config.m
        )));
    }
    let specs: Vec<(String, ProblemSpec)> = config
        .ks
        .iter()
        .map(|&k| {
            (
                format!("{}-k{k}", config.kind),
                ProblemSpec {
                    kind: config.kind,
                    n: config.n,
                    m: config.m,
                    k,
                    noise: config.noise,
                    terms: config.terms,
                },
            )
        })
        .collect();
    Ok(run_batch(
        &specs,
        config.trials,
        &config.algorithms,
        &config.params,
        config.seed,
    ))
}

/// Aggregates trial records into `(algorithm, k)` rows, algorithm-major.
pub fn summarize_table(config: &TableConfig, records: &[TrialRecord]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for &algorithm in &config.algorithms {
        for &k in &config.ks {
            let id = format!("{}-k{k}", config.kind);
            let (frequency, trials) = frequency(records, &id, algorithm);
            rows.push(TableRow {
                algorithm,
                k,
                frequency,
                half_width: half_width(frequency, trials),
                trials,
            });
        }
    }
    rows
}

pub fn recovery_table(config: &TableConfig) -> Result<Vec<TableRow>> {
    let records = table_trials(config)?;
    Ok(summarize_table(config, &records))
}

/// Runs `f` on a dedicated pool with `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::NumericalFailure(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub algorithm: Algorithm,
    pub repeats: usize,
    /// Median wall time over the repeats.
    pub wall_time_ns: u64,
    pub exact_recovery_rate: f64,
}

/// Wall-time sweep over dictionary widths at fixed `n/m` and `k/n`. Rows are
/// sorted by `(m, algorithm)`. Runs sequentially so timings are not skewed
/// by contention.
pub fn benchmark(
    sizes: &[usize],
    n_ratio: f64,
    k_ratio: f64,
    algorithms: &[Algorithm],
    repeats: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    check_algorithms(algorithms)?;
    check_trials(repeats)?;
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut algorithms = algorithms.to_vec();
    algorithms.sort_unstable();
    algorithms.dedup();
    let params = TrialParams::default();
    let mut rows = Vec::new();
    for &m in &sizes {
        let (n, k) = phase_cell_size(m, n_ratio, k_ratio);
        let spec = ProblemSpec {
            kind: MatrixKind::Gaussian,
            n: n.max(1),
            m,
            k: k.clamp(1, m),
            noise,
            terms: None,
        };
        let problems: Vec<RecoveryProblem> = (0..repeats)
            .map(|r| RecoveryProblem::generate(&spec, derive_seed(seed, &[m as u64, r as u64])))
            .collect::<Result<_>>()?;
        for &algorithm in &algorithms {
            let results: Vec<TrialResult> = problems
                .iter()
                .map(|p| run_trial(p, algorithm, &params))
                .collect();
            let mut times: Vec<u64> = results.iter().map(|r| r.wall_time_ns).collect();
            times.sort_unstable();
            rows.push(BenchRow {
                n: spec.n,
                m,
                k: spec.k,
                algorithm,
                repeats,
                wall_time_ns: times[times.len() / 2],
                exact_recovery_rate: results.iter().filter(|r| r.exact_recovery).count() as f64
                    / repeats as f64,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Kernel regression

/// Matérn-3/2 kernel `(1 + √3 r/ℓ) exp(−√3 r/ℓ)`.
pub fn matern32(x: &[f64], x2: &[f64], ell: f64) -> Result<f64> {
    if !(ell > 0.0 && ell.is_finite()) {
        return Err(Error::BadArity(format!(
            "lengthscale must be positive, got {ell}"
        )));
    }
    if x.len() != x2.len() {
        return Err(Error::BadArity(format!(
            "input dimensions differ: {} vs {}",
            x.len(),
            x2.len()
        )));
    }
    Ok(matern32_unchecked(x, x2, ell))
}

fn matern32_unchecked(x: &[f64], x2: &[f64], ell: f64) -> f64 {
    let r2: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    let t = 3f64.sqrt() * r2.sqrt() / ell;
    (1.0 + t) * (-t).exp()
}

/// Numeric table with one response column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One row per sample.
    pub features: DMatrix<f64>,
    pub response: DVector<f64>,
    /// Column names when the file had a header (features, then response).
    pub header: Option<Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

fn split_cells(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Parses comma- or whitespace-delimited numeric text. A non-numeric first
/// row is taken as a header; blank and `#` lines are skipped. The response
/// is column `response_col` (default: last).
pub fn parse_dataset(text: &str, response_col: Option<usize>) -> Result<Dataset> {
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells = split_cells(line);
        let parsed: Vec<std::result::Result<f64, _>> =
            cells.iter().map(|c| c.parse::<f64>()).collect();
        if rows.is_empty() && header.is_none() && parsed.iter().any(|p| p.is_err()) {
            header = Some(cells.iter().map(|c| c.to_string()).collect::<Vec<_>>());
            width = Some(cells.len());
            continue;
        }
        let expected = *width.get_or_insert(cells.len());
        if cells.len() != expected {
            return Err(Error::DataFormat {
                line: line_no,
                column: cells.len().min(expected) + 1,
                message: format!("expected {expected} cells, found {}", cells.len()),
            });
        }
        let mut row = Vec::with_capacity(cells.len());
        for (col, (cell, value)) in cells.iter().zip(parsed).enumerate() {
            match value {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::DataFormat {
                        line: line_no,
                        column: col + 1,
                        message: if cell.is_empty() {
                            "missing value".into()
                        } else {
                            format!("not a finite number: `{cell}`")
                        },
                    })
                }
            }
        }
        rows.push(row);
    }
    let width = width.unwrap_or(0);
    if rows.is_empty() || width < 2 {
        return Err(Error::DataFormat {
            line: 0,
            column: 0,
            message: "need at least one data row with a feature and a response".into(),
        });
    }
    let target = response_col.unwrap_or(width - 1);
    if target >= width {
        return Err(Error::DataFormat {
            line: 0,
            column: target + 1,
            message: format!(
                "response column {} out of range for {width} columns",
                target + 1
            ),
        });
    }
    let features = DMatrix::from_fn(rows.len(), width - 1, |i, j| {
        rows[i][if j < target { j } else { j + 1 }]
    });
    let response = DVector::from_iterator(rows.len(), rows.iter().map(|r| r[target]));
    let header = header.map(|mut h| {
        let name = h.remove(target);
        h.push(name);
        h
    });
    Ok(Dataset {
        features,
        response,
        header,
    })
}

pub fn load_dataset(path: &Path, response_col: Option<usize>) -> Result<Dataset> {
    parse_dataset(&std::fs::read_to_string(path)?, response_col)
}

/// Writes comma-separated text that [`parse_dataset`] reads back exactly,
/// with the response as last column.
pub fn write_dataset(out: &mut impl Write, data: &Dataset) -> io::Result<()> {
    if let Some(h) = &data.header {
        writeln!(out, "{}", h.join(","))?;
    }
    for i in 0..data.len() {
        let mut cells: Vec<String> = data.features.row(i).iter().map(|v| v.to_string()).collect();
        cells.push(data.response[i].to_string());
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Per-feature centering and scaling fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardizer {
    /// Constant features keep scale 1.
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let rows = features.nrows().max(1) as f64;
        let mean = DVector::from_iterator(
            features.ncols(),
            features.column_iter().map(|c| c.sum() / rows),
        );
        let scale = DVector::from_iterator(
            features.ncols(),
            features.column_iter().zip(mean.iter()).map(|(c, &mu)| {
                let var = c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / rows;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            }),
        );
        Self { mean, scale }
    }

    pub fn transform(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.mean[j]) / self.scale[j]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub split_seeds: Vec<u64>,
    /// Absolute tolerances, interpreted per algorithm as in [`select`].
    pub deltas: Vec<f64>,
    /// Lengthscale; `None` means `√d`.
    pub ell: Option<f64>,
    pub algorithms: Vec<Algorithm>,
    pub train_fraction: f64,
    /// Standardize features with training statistics.
    pub standardize: bool,
    /// Subtract the training mean from the response before fitting.
    pub center: bool,
    /// Rows always placed in the training set.
    pub pinned_train: Vec<usize>,
    pub params: TrialParams,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            split_seeds: (0..8).collect(),
            deltas: Vec::new(),
            ell: None,
            algorithms: Algorithm::KERNEL.to_vec(),
            train_fraction: 0.75,
            standardize: true,
            center: true,
            pinned_train: Vec::new(),
            params: TrialParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelPoint {
    pub algorithm: Algorithm,
    pub split: usize,
    pub delta: f64,
    pub sparsity: usize,
    pub rmse: f64,
}

/// Outcome of a kernel run: successful points plus solver failures.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelReport {
    pub points: Vec<KernelPoint>,
    pub failures: Vec<(Algorithm, usize, f64, String)>,
}

fn train_test_split(
    len: usize,
    fraction: f64,
    pinned: &[usize],
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng(seed);
    let n_train = ((len as f64) * fraction).round() as usize;
    let mut is_pinned = vec![false; len];
    for &p in pinned {
        if p < len {
            is_pinned[p] = true;
        }
    }
    let mut train: Vec<usize> = (0..len).filter(|&i| is_pinned[i]).collect();
    let mut rest: Vec<usize> = (0..len).filter(|&i| !is_pinned[i]).collect();
    // Fisher-Yates via the rng stream; stable across platforms.
    for i in (1..rest.len()).rev() {
        let j = rng.gen_range(0..=i);
        rest.swap(i, j);
    }
    let need = n_train.saturating_sub(train.len()).min(rest.len());
    train.extend_from_slice(&rest[..need]);
    let mut test = rest[need..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Sparse kernel regression `f(x) = Σ_j k(x, x_j) w_j` over training
/// centers, fitted by each algorithm for each tolerance and split, scored
/// by test RMSE.
pub fn kernel_regression_experiment(data: &Dataset, config: &KernelConfig) -> Result<KernelReport> {
    check_algorithms(&config.algorithms)?;
    if config.deltas.is_empty() || config.split_seeds.is_empty() {
        return Err(Error::BadArity(
            "need at least one tolerance and one split".into(),
        ));
    }
    if config.deltas.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
        return Err(Error::BadArity("tolerances must be finite and >= 0".into()));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::BadArity(format!(
            "train fraction must lie in (0, 1), got {}",
            config.train_fraction
        )));
    }
    let d = data.features.ncols();
    let ell = config.ell.unwrap_or((d as f64).sqrt());
    matern32(&[0.0], &[0.0], ell)?;
    if data.len() < 4 {
        return Err(Error::BadArity("dataset needs at least 4 rows".into()));
    }

    let jobs: Vec<(usize, u64)> = config.split_seeds.iter().copied().enumerate().collect();
    let per_split: Vec<Result<KernelReport>> = jobs
        .par_iter()
        .map(|&(split, seed)| kernel_split(data, config, ell, split, seed))
        .collect();
    let mut report = KernelReport {
        points: Vec::new(),
        failures: Vec::new(),
    };
    for r in per_split {
        let r = r?;
        report.points.extend(r.points);
        report.failures.extend(r.failures);
    }
    Ok(report)
}

fn kernel_split(
    data: &Dataset,
    config: &KernelConfig,
    ell: f64,
    split: usize,
    seed: u64,
) -> Result<KernelReport> {
    let (train, test) = train_test_split(
        data.len(),
        config.train_fraction,
        &config.pinned_train,
        seed,
    );
    if train.is_empty() || test.is_empty() {
        return Err(Error::BadArity(
            "split leaves an empty train or test set".into(),
        ));
    }
    let x_train = data.features.select_rows(&train);
    let x_test = data.features.select_rows(&test);
    let (x_train, x_test) = if config.standardize {
        let s = Standardizer::fit(&x_train);
        (s.transform(&x_train), s.transform(&x_test))
    } else {
        (x_train, x_test)
    };
    let y_train = DVector::from_iterator(train.len(), train.iter().map(|&i| data.response[i]));
    let y_test = DVector::from_iterator(test.len(), test.iter().map(|&i| data.response[i]));
    let offset = if config.center { y_train.mean() } else { 0.0 };
    let target = y_train.add_scalar(-offset);

    let rows_train: Vec<Vec<f64>> = (0..train.len())
        .map(|i| x_train.row(i).iter().copied().collect())
        .collect();
    let rows_test: Vec<Vec<f64>> = (0..test.len())
        .map(|i| x_test.row(i).iter().copied().collect())
        .collect();
    let kernel = DMatrix::from_fn(train.len(), train.len(), |i, j| {
        matern32_unchecked(&rows_train[i], &rows_train[j], ell)
    });
    let (dict, norms) = Dictionary::normalize(kernel)?;
    let cross = DMatrix::from_fn(test.len(), train.len(), |i, j| {
        matern32_unchecked(&rows_test[i], &rows_train[j], ell)
    });

    let mut report = KernelReport {
        points: Vec::new(),
        failures: Vec::new(),
    };
    for &algorithm in &config.algorithms {
        for &delta in &config.deltas {
            match fit_weights(algorithm, &dict, &target, delta, &config.params) {
                Ok((support, coeffs)) => {
                    let mut pred = DVector::from_element(test.len(), offset);
                    for (&j, &c) in support.iter().zip(coeffs.iter()) {
                        pred.axpy(c / norms[j], &cross.column(j), 1.0);
                    }
                    let rmse = ((pred - &y_test).norm_squared() / test.len() as f64).sqrt();
                    report.points.push(KernelPoint {
                        algorithm,
                        split,
                        delta,
                        sparsity: support.len(),
                        rmse,
                    });
                }
                Err(e) => report
                    .failures
                    .push((algorithm, split, delta, e.to_string())),
            }
        }
    }
    Ok(report)
}

/// Support and weights on the normalized dictionary: least squares on the
/// support for stepwise methods, the posterior mean for SBL methods.
fn fit_weights(
    algorithm: Algorithm,
    dict: &Dictionary,
    y: &DVector<f64>,
    delta: f64,
    params: &TrialParams,
) -> Result<(Vec<usize>, DVector<f64>)> {
    let sel = select(algorithm, dict, y, delta, params)?;
    let coeffs = match &sel.coefficients {
        Some(full) => {
            DVector::from_iterator(sel.support.len(), sel.support.iter().map(|&j| full[j]))
        }
        None => ls_solve(dict, &sel.support, y)?.0,
    };
    Ok((sel.support, coeffs))
}

/// Smallest test RMSE among an algorithm's points on one split with
/// sparsity at most `s`.
pub fn frontier_rmse(
    points: &[KernelPoint],
    algorithm: Algorithm,
    split: usize,
    s: usize,
) -> Option<f64> {
    points
        .iter()
        .filter(|p| p.algorithm == algorithm && p.split == split && p.sparsity <= s)
        .map(|p| p.rmse)
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.min(v)))
        })
}

/// Per split: mean frontier RMSE of `a` and `b` over sparsity levels in
/// `window` where both frontiers exist. Splits without overlap are omitted.
pub fn compare_frontiers(
    points: &[KernelPoint],
    a: Algorithm,
    b: Algorithm,
    window: (usize, usize),
) -> Vec<(usize, f64, f64)> {
    let mut splits: Vec<usize> = points.iter().map(|p| p.split).collect();
    splits.sort_unstable();
    splits.dedup();
    splits
        .into_iter()
        .filter_map(|split| {
            let pairs: Vec<(f64, f64)> = (window.0..=window.1)
                .filter_map(|s| {
                    Some((
                        frontier_rmse(points, a, split, s)?,
                        frontier_rmse(points, b, split, s)?,
                    ))
                })
                .collect();
            if pairs.is_empty() {
                return None;
            }
            let len = pairs.len() as f64;
            let (sa, sb) = pairs
                .iter()
                .fold((0.0, 0.0), |(x, y), (p, q)| (x + p, y + q));
            Some((split, sa / len, sb / len))
        })
        .collect()
}

/// Inputs uniform on `[−1, 1]^d` with responses from a sparse Matérn
/// expansion over `centers` randomly chosen rows, plus Gaussian noise of
/// standard deviation `noise`. Returns the data, the center rows and their
/// weights.
pub fn synthetic_kernel_dataset(
    len: usize,
    d: usize,
    centers: usize,
    noise: f64,
    ell: f64,
    seed: u64,
) -> Result<(Dataset, Vec<usize>, Vec<f64>)> {
    if centers == 0 || centers > len || d == 0 {
        return Err(Error::BadArity(
            "need 1 <= centers <= rows and d >= 1".into(),
        ));
    }
    matern32(&[0.0], &[0.0], ell)?;
    let mut rng = rng(seed);
    let features = DMatrix::from_fn(len, d, |_, _| rng.gen_range(-1.0..1.0));
    let mut rows = sample(&mut rng, len, centers).into_vec();
    rows.sort_unstable();
    let weights: Vec<f64> = rows
        .iter()
        .map(|_| {
            let mag = rng.gen_range(1.0..2.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let points: Vec<Vec<f64>> = (0..len)
        .map(|i| features.row(i).iter().copied().collect())
        .collect();
    let response = DVector::from_fn(len, |i, _| {
        let f: f64 = rows
            .iter()
            .zip(&weights)
            .map(|(&c, &w)| w * matern32_unchecked(&points[i], &points[c], ell))
            .sum();
        let e: f64 = StandardNormal.sample(&mut rng);
        f + noise * e
    });
    Ok((
        Dataset {
            features,
            response,
            header: None,
        },
        rows,
        weights,
    ))
}

/// Friedman #1 regression data: ten uniform inputs, five informative,
/// `y = 10 sin(π x₁x₂) + 20 (x₃ − ½)² + 10 x₄ + 5 x₅ + N(0, noise²)`.
pub fn friedman1(len: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = rng(seed);
    let features = DMatrix::from_fn(len, 10, |_, _| rng.gen_range(0.0..1.0));
    let response = DVector::from_fn(len, |i, _| {
        let x = |j: usize| features[(i, j)];
        let e: f64 = StandardNormal.sample(&mut rng);
        10.0 * (std::f64::consts::PI * x(0) * x(1)).sin()
            + 20.0 * (x(2) - 0.5).powi(2)
            + 10.0 * x(3)
            + 5.0 * x(4)
            + noise * e
    });
    Dataset {
        features,
        response,
        header: None,
    }
}

// ---------------------------------------------------------------------------
// CSV output

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub const TRIAL_HEADER: &str =
    "experiment_id,algorithm,n,m,k,seed,exact_recovery,residual_norm,wall_time_ns";
pub const GRID_HEADER: &str = "n_ratio,k_ratio,algorithm,frequency,half_width,trials";
pub const TABLE_HEADER: &str = "algorithm,k,frequency,half_width,trials";
pub const KERNEL_HEADER: &str = "algorithm,split,delta,sparsity,rmse";
pub const BENCH_HEADER: &str = "n,m,k,algorithm,repeats,wall_time_ns,exact_recovery_rate";

/// Trial rows; `zero_time` blanks wall times for byte-reproducible output.
pub fn write_trials_csv(
    out: &mut impl Write,
    records: &[TrialRecord],
    zero_time: bool,
) -> io::Result<()> {
    writeln!(out, "{TRIAL_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.experiment_id,
            r.result.algorithm,
            r.n,
            r.m,
            r.k,
            r.result.seed,
            r.result.exact_recovery,
            fmt_f64(r.result.residual_norm),
            if zero_time { 0 } else { r.result.wall_time_ns }
        )?;
    }
    Ok(())
}

pub fn write_grid_csv(out: &mut impl Write, cells: &[PhaseCell]) -> io::Result<()> {
    writeln!(out, "{GRID_HEADER}")?;
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_f64(c.n_ratio),
            fmt_f64(c.k_ratio),
            c.algorithm,
            fmt_f64(c.frequency),
            fmt_f64(c.half_width),
            c.trials
        )?;
    }
    Ok(())
}

pub fn write_table_csv(out: &mut impl Write, rows: &[TableRow]) -> io::Result<()> {
    writeln!(out, "{TABLE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.algorithm,
            r.k,
            fmt_f64(r.frequency),
            fmt_f64(r.half_width),
            r.trials
        )?;
    }
    Ok(())
}

pub fn write_kernel_csv(out: &mut impl Write, points: &[KernelPoint]) -> io::Result<()> {
    writeln!(out, "{KERNEL_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.algorithm,
            p.split,
            fmt_f64(p.delta),
            p.sparsity,
            fmt_f64(p.rmse)
        )?;
    }
    Ok(())
}

pub fn write_bench_csv(out: &mut impl Write, rows: &[BenchRow], zero_time: bool) -> io::Result<()> {
    writeln!(out, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.n,
            r.m,
            r.k,
            r.algorithm,
            r.repeats,
            if zero_time { 0 } else { r.wall_time_ns },
            fmt_f64(r.exact_recovery_rate)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guarantees::{babel, coherence, forward_noise_bound};

    #[test]
    fn gaussian_dictionary_contract() {
        let a = gen_gaussian_dictionary(10, 20, 3).unwrap();
        let b = gen_gaussian_dictionary(10, 20, 3).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        for j in 0..20 {
            assert!((a.column(j).norm() - 1.0).abs() < 1e-12);
        }
        assert_ne!(
            a.matrix(),
            gen_gaussian_dictionary(10, 20, 4).unwrap().matrix()
        );
        assert!(gen_gaussian_dictionary(0, 3, 1).is_err());
    }

    #[test]
    fn gaussian_coherence_level() {
        // Monte-Carlo reference for 64×128 at build time.
        let mean: f64 = (0..100)
            .map(|s| coherence(&gen_gaussian_dictionary(64, 128, s).unwrap()).unwrap())
            .sum::<f64>()
            / 100.0;
        assert!((mean - 0.43).abs() < 0.05, "mean coherence {mean}");
    }

    #[test]
    fn correlated_dictionary_contract() {
        let d = gen_correlated_dictionary(6, 9, 1, 2).unwrap();
        for i in 0..9 {
            assert!((d.column(i).norm() - 1.0).abs() < 1e-12);
            for j in 0..9 {
                assert!((d.column(i).dot(&d.column(j)).abs() - 1.0).abs() < 1e-12);
            }
        }
        let mut gauss: Vec<f64> = Vec::new();
        let mut corr: Vec<f64> = Vec::new();
        for s in 0..100 {
            gauss.push(coherence(&gen_gaussian_dictionary(64, 128, s).unwrap()).unwrap());
            corr.push(coherence(&gen_correlated_dictionary(64, 128, 64, s).unwrap()).unwrap());
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let (g, c) = (median(&mut gauss), median(&mut corr));
        assert!(c > g + 0.3, "median coherence {c} vs {g}");
        assert!(gen_correlated_dictionary(4, 4, 0, 1).is_err());
    }

    #[test]
    fn sparse_signal_contract() {
        let (x, s) = gen_sparse_signal(7, 7, 1).unwrap();
        assert_eq!(s, (0..7).collect::<Vec<_>>());
        assert!(x.iter().all(|v| v.abs() == 1.0));
        assert!(gen_sparse_signal(7, 0, 1).is_err());
        assert!(gen_sparse_signal(7, 8, 1).is_err());

        // Uniform support: chi-square over index hit counts at the 1% level.
        let (m, k, draws) = (20usize, 3usize, 100_000u64);
        let mut counts = vec![0f64; m];
        for s in 0..draws {
            for i in gen_sparse_signal(m, k, s).unwrap().1 {
                counts[i] += 1.0;
            }
        }
        let expected = (draws as f64) * k as f64 / m as f64;
        let chi2: f64 = counts
            .iter()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        // 99th percentile of chi-square with 19 degrees of freedom.
        assert!(chi2 < 36.19, "chi2 {chi2}");
    }

    #[test]
    fn noise_contract() {
        assert_eq!(gen_noise(5, 0.0, 1).unwrap(), DVector::zeros(5));
        let e = gen_noise(9, 0.37, 2).unwrap();
        assert!((e.norm() - 0.37).abs() < 1e-12);
        assert!(gen_noise(3, -1.0, 1).is_err());
        // Mean direction of uniform unit vectors has norm about 1/sqrt(draws).
        let draws = 100_000u64;
        let mut sum = DVector::zeros(4);
        for s in 0..draws {
            sum += gen_noise(4, 1.0, s).unwrap();
        }
        let mean = sum / draws as f64;
        assert!(
            mean.norm() < 5.0 / (draws as f64).sqrt(),
            "mean direction {}",
            mean.norm()
        );
    }

    #[test]
    fn problem_construction_identities() {
        for kind in [MatrixKind::Gaussian, MatrixKind::Correlated] {
            let spec = ProblemSpec {
                kind,
                n: 12,
                m: 20,
                k: 3,
                noise: 0.05,
                terms: None,
            };
            let p = RecoveryProblem::generate(&spec, 11).unwrap();
            assert_eq!(p.y, p.dict.matrix() * &p.x_true + &p.noise);
            assert!((p.noise.norm() - 0.05).abs() < 1e-12);
            assert_eq!(p.support_true.len(), 3);
            assert!(p.support_true.iter().all(|&i| p.x_true[i].abs() == 1.0));
            let q = RecoveryProblem::generate(&spec, 11).unwrap();
            assert_eq!(p.y, q.y);
        }
    }

    #[test]
    fn algorithm_ids_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.id().parse::<Algorithm>().unwrap(), a);
        }
        assert!("lasso".parse::<Algorithm>().is_err());
        assert_eq!(
            "correlated".parse::<MatrixKind>().unwrap(),
            MatrixKind::Correlated
        );
    }

    #[test]
    fn noiseless_incoherent_instances_are_recovered_by_all() {
        let mut checked = 0;
        for seed in 0..200u64 {
            let spec = ProblemSpec {
                kind: MatrixKind::Gaussian,
                n: 400,
                m: 40,
                k: 2,
                noise: 0.0,
                terms: None,
            };
            let p = RecoveryProblem::generate(&spec, seed).unwrap();
            let mu1 = babel(&p.dict, 2).unwrap();
            if forward_noise_bound(mu1, 1.0) <= 0.0 {
                continue;
            }
            checked += 1;
            for a in Algorithm::ALL {
                let r = run_trial(&p, a, &TrialParams::default());
                assert!(
                    r.exact_recovery,
                    "{a} seed {seed}: {:?} {:?}",
                    r.recovered, r.error
                );
            }
            if checked == 10 {
                break;
            }
        }
        assert_eq!(checked, 10);
    }

    #[test]
    fn trials_are_deterministic_and_errors_recorded() {
        let spec = ProblemSpec {
            kind: MatrixKind::Gaussian,
            n: 16,
            m: 32,
            k: 3,
            noise: 1e-2,
            terms: None,
        };
        let p = RecoveryProblem::generate(&spec, 5).unwrap();
        for a in Algorithm::TABLE {
            let mut x = run_trial(&p, a, &TrialParams::default());
            let mut y = run_trial(&p, a, &TrialParams::default());
            x.wall_time_ns = 0;
            y.wall_time_ns = 0;
            assert_eq!(x, y);
        }
        let r = run_trial(&p, Algorithm::Br, &TrialParams::default());
        assert!(!r.exact_recovery && r.error.as_deref().unwrap().contains("determined"));
    }

    #[test]
    fn phase_cells_sizes_and_skips() {
        assert_eq!(phase_cell_size(128, 0.5, 0.25), (64, 16));
        assert_eq!(phase_cell_size(128, 0.3, 0.1), (38, 4));
        let config = PhaseConfig {
            m: 16,
            n_ratios: vec![0.05, 0.5],
            k_ratios: vec![0.01, 0.5],
            trials: 4,
            algorithms: vec![Algorithm::Fr, Algorithm::Rmp0],
            ..PhaseConfig::default()
        };
        let cells = phase_grid(&config).unwrap();
        assert_eq!(cells.len(), 8);
        let skipped: Vec<_> = cells.iter().filter(|c| c.trials == 0).collect();
        assert!(skipped.iter().all(|c| c.frequency == 0.0));
        assert!(cells.iter().any(|c| c.trials == 4));
        assert!(phase_grid(&PhaseConfig {
            trials: 0,
            ..config.clone()
        })
        .is_err());
    }

    #[test]
    fn batches_do_not_depend_on_worker_count() {
        let config = TableConfig {
            n: 12,
            m: 24,
            ks: vec![2, 3],
            trials: 6,
            ..TableConfig::table1()
        };
        let strip = |mut v: Vec<TrialRecord>| {
            v.iter_mut().for_each(|r| r.result.wall_time_ns = 0);
            v
        };
        let one = strip(with_workers(1, || table_trials(&config)).unwrap().unwrap());
        let three = strip(with_workers(3, || table_trials(&config)).unwrap().unwrap());
        assert_eq!(one, three);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_trials_csv(&mut a, &one, true).unwrap();
        write_trials_csv(&mut b, &three, true).unwrap();
        assert_eq!(a, b);
        let rows = summarize_table(&config, &one);
        assert_eq!(rows.len(), config.algorithms.len() * 2);
        assert!(rows.iter().all(|r| r.trials == 6));
    }

    #[test]
    fn matern_values() {
        assert_eq!(matern32(&[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(), 1.0);
        assert!(matern32(&[0.0], &[1e6], 1.0).unwrap() < 1e-300);
        // (1 + √3) e^{−√3}, evaluated to 20 digits.
        assert!((matern32(&[0.0], &[1.0], 1.0).unwrap() - 0.48335772459650765060).abs() < 1e-15);
        assert!(matern32(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn dataset_parsing() {
        let d = parse_dataset("a,b,y\n1,2,3\n4,5,6\n", None).unwrap();
        assert_eq!(
            d.features,
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 5.0])
        );
        assert_eq!(d.response, DVector::from_vec(vec![3.0, 6.0]));
        assert_eq!(d.header.as_ref().unwrap()[2], "y");

        let d = parse_dataset("# note\n1 2 3\n\n4 5 6\n", Some(0)).unwrap();
        assert_eq!(d.response, DVector::from_vec(vec![1.0, 4.0]));
        assert_eq!(d.features.row(1)[0], 5.0);

        match parse_dataset("1,2,3\n4,,6\n", None) {
            Err(Error::DataFormat { line, column, .. }) => assert_eq!((line, column), (2, 2)),
            other => panic!("{other:?}"),
        }
        match parse_dataset("1,2,3\n4,5\n", None) {
            Err(Error::DataFormat { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_dataset("1,2,x\n3,4,y\n", None).is_err());
        assert!(parse_dataset("", None).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let mut data = friedman1(17, 0.3, 4);
        data.header = Some((0..11).map(|i| format!("c{i}")).collect());
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let back = parse_dataset(std::str::from_utf8(&buf).unwrap(), None).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn standardizer_uses_training_statistics() {
        let train = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let s = Standardizer::fit(&train);
        let t = s.transform(&train);
        assert!(t.column(0).mean().abs() < 1e-15);
        assert!((t.column(0).norm_squared() / 3.0 - 1.0).abs() < 1e-12);
        assert_eq!(s.scale[1], 1.0);
        let test = DMatrix::from_row_slice(1, 2, &[4.0, 6.0]);
        assert!((s.transform(&test)[(0, 0)] - 2.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn split_respects_pins_and_fraction() {
        let (train, test) = train_test_split(20, 0.75, &[3, 19], 9);
        assert_eq!(train.len(), 15);
        assert_eq!(test.len(), 5);
        assert!(train.contains(&3) && train.contains(&19));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn constant_response_needs_no_features() {
        let mut data = friedman1(40, 0.0, 1);
        data.response.fill(3.5);
        let config = KernelConfig {
            split_seeds: vec![0, 1],
            deltas: vec![1e-3],
            algorithms: vec![Algorithm::Rmp0, Algorithm::RmpSigma],
            ..KernelConfig::default()
        };
        let report = kernel_regression_experiment(&data, &config).unwrap();
        assert!(report.failures.is_empty());
        for p in &report.points {
            assert!(p.sparsity <= 1 && p.rmse < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn synthetic_kernel_model_is_recovered() {
        let (noise, ell) = (0.01, 0.8);
        let (data, centers, _) = synthetic_kernel_dataset(120, 2, 4, noise, ell, 3).unwrap();
        let config = KernelConfig {
            split_seeds: vec![0],
            deltas: vec![noise * 90f64.sqrt() * 1.2],
            ell: Some(ell),
            algorithms: vec![Algorithm::Rmp0Plus],
            standardize: false,
            center: false,
            pinned_train: centers,
            ..KernelConfig::default()
        };
        let report = kernel_regression_experiment(&data, &config).unwrap();
        let p = &report.points[0];
        assert!(p.sparsity <= 8 && p.rmse <= 2.0 * noise, "{p:?}");
    }

    #[test]
    fn frontier_helpers() {
        let pt = |algorithm, split, sparsity, rmse| KernelPoint {
            algorithm,
            split,
            delta: 0.0,
            sparsity,
            rmse,
        };
        let points = vec![
            pt(Algorithm::Fr, 0, 2, 3.0),
            pt(Algorithm::Fr, 0, 5, 2.0),
            pt(Algorithm::Rmp0Plus, 0, 3, 1.5),
        ];
        assert_eq!(frontier_rmse(&points, Algorithm::Fr, 0, 1), None);
        assert_eq!(frontier_rmse(&points, Algorithm::Fr, 0, 4), Some(3.0));
        assert_eq!(frontier_rmse(&points, Algorithm::Fr, 0, 6), Some(2.0));
        let cmp = compare_frontiers(&points, Algorithm::Rmp0Plus, Algorithm::Fr, (3, 5));
        assert_eq!(cmp.len(), 1);
        assert!(
            (cmp[0].1 - 1.5).abs() < 1e-15 && (cmp[0].2 - (3.0 + 3.0 + 2.0) / 3.0).abs() < 1e-15
        );
    }
}
