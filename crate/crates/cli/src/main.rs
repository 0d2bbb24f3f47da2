mod svg;

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use sparse_pursuit::experiments::{
    self, derive_seed, Algorithm, Dataset, KernelConfig, MatrixKind, PhaseConfig, ProblemSpec,
    RecoveryProblem, TableConfig, TrialParams,
};
use sparse_pursuit::guarantees;
use sparse_pursuit::stepwise::{self, StopRule};
use sparse_pursuit::{Dictionary, Error};

#[derive(Parser)]
#[command(
    name = "sparse-pursuit",
    version,
    about = "Sparse recovery experiments and guarantees"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "SPARSE_PURSUIT_WORKERS")]
    workers: Option<usize>,
    /// Write results here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Omit timestamps and wall times so output is byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Table1,
    Table2,
}

#[derive(Subcommand)]
enum Command {
    /// Recover the support of one problem instance.
    Recover(RecoverArgs),
    /// Coherence, babel, ERC and noise bounds for a dictionary.
    Bounds(BoundsArgs),
    /// Recovery frequency over an (n/m, k/n) grid.
    Phase(PhaseArgs),
    /// Recovery frequency table at fixed size.
    Table(TableArgs),
    /// Sparse kernel regression sweep over tolerances.
    Kernel(KernelArgs),
    /// Wall-time sweep over dictionary widths.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long, value_parser = parse_alg)]
    alg: Algorithm,
    /// Text file: one row of the dictionary per line followed by the target.
    #[arg(long, conflicts_with = "gen")]
    problem: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    gen: Option<MatrixKind>,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long, default_value_t = 12)]
    k: usize,
    /// Noise radius ‖ε‖.
    #[arg(long, default_value_t = 1e-2)]
    noise: f64,
    /// Term count for the correlated generator.
    #[arg(long)]
    terms: Option<usize>,
    /// Tolerance (default: 2‖ε‖ for generated problems, 0 for files).
    #[arg(long)]
    delta: Option<f64>,
    /// Stop at this many columns instead (omp, fr, br).
    #[arg(long)]
    target_sparsity: Option<usize>,
}

#[derive(Args)]
struct BoundsArgs {
    /// Whitespace or comma separated matrix, one row per line.
    #[arg(long, conflicts_with_all = ["gen", "identity"])]
    matrix: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind, conflicts_with = "identity")]
    gen: Option<MatrixKind>,
    /// Use the n×n identity.
    #[arg(long)]
    identity: Option<usize>,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long)]
    terms: Option<usize>,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    x_min: f64,
    /// Support for the ERC, comma separated.
    #[arg(long, value_delimiter = ',')]
    support: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.1])]
    deltas: Vec<f64>,
}

#[derive(Args)]
struct PhaseArgs {
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long, value_delimiter = ',')]
    n_ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    k_ratios: Option<Vec<f64>>,
    #[arg(long, default_value_t = 256)]
    trials: usize,
    #[arg(long, default_value_t = 1e-2)]
    noise: f64,
    #[arg(long, value_delimiter = ',', value_parser = parse_alg)]
    algs: Option<Vec<Algorithm>>,
    #[arg(long, value_parser = parse_kind, default_value = "gaussian")]
    matrix: MatrixKind,
    #[arg(long)]
    terms: Option<usize>,
    /// Also write a heatmap.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, value_enum, default_value = "table1")]
    preset: Preset,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_alg)]
    algs: Option<Vec<Algorithm>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Also write per-trial rows.
    #[arg(long)]
    trials_csv: Option<PathBuf>,
}

#[derive(Args)]
struct KernelArgs {
    /// Numeric table; the response is the last column unless --response-col.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use a generated two-dimensional dataset.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    response_col: Option<usize>,
    #[arg(long, default_value_t = 8)]
    splits: u64,
    /// Tolerances (default: a geometric grid scaled to the response).
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    /// Matérn lengthscale (default: √d).
    #[arg(long)]
    ell: Option<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_alg)]
    algs: Option<Vec<Algorithm>>,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    no_center: bool,
    /// Also write a sparsity/RMSE scatter.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![32, 64, 128, 256])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    n_ratio: f64,
    /// Sparsity as a fraction of n.
    #[arg(long, default_value_t = 0.25)]
    k_ratio: f64,
    #[arg(long, value_delimiter = ',', value_parser = parse_alg)]
    algs: Option<Vec<Algorithm>>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1e-2)]
    noise: f64,
}

fn parse_alg(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<MatrixKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) => match e {
                Error::BadArity(_)
                | Error::DataFormat { .. }
                | Error::Io(_)
                | Error::NotNormalized => 1,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Resolved configuration printed as `#` lines ahead of the CSV.
struct Report {
    config: Vec<(String, String)>,
    body: Vec<u8>,
}

impl Report {
    fn new() -> Self {
        Self {
            config: Vec::new(),
            body: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.config.push((key.to_string(), value.to_string()));
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    let workers = match g.workers {
        Some(0) => return usage("--workers must be at least 1"),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let (name, mut report) = match &cli.command {
        Command::Recover(a) => ("recover", recover(a, g)?),
        Command::Bounds(a) => ("bounds", bounds(a, g)?),
        Command::Phase(a) => (
            "phase",
            experiments::with_workers(workers, || phase(a, g))??,
        ),
        Command::Table(a) => (
            "table",
            experiments::with_workers(workers, || table(a, g))??,
        ),
        Command::Kernel(a) => (
            "kernel",
            experiments::with_workers(workers, || kernel(a, g))??,
        ),
        Command::Bench(a) => ("bench", bench(a, g)?),
    };
    let mut head = String::new();
    let _ = writeln!(head, "# sparse-pursuit {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(head, "# command: {name}");
    let _ = writeln!(head, "# seed: {}", g.seed);
    if !g.deterministic {
        let _ = writeln!(head, "# workers: {workers}");
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let _ = writeln!(head, "# timestamp: {secs}");
    }
    for (k, v) in report.config.drain(..) {
        let _ = writeln!(head, "# {k}: {v}");
    }
    let mut bytes = head.into_bytes();
    bytes.extend_from_slice(&report.body);
    match &g.output {
        Some(path) => fs::write(path, bytes)?,
        None => {
            let mut out = io::stdout().lock();
            out.write_all(&bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn load_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    let data = experiments::load_dataset(path, None)?;
    let (rows, cols) = data.features.shape();
    Ok(DMatrix::from_fn(rows, cols + 1, |i, j| {
        if j < cols {
            data.features[(i, j)]
        } else {
            data.response[i]
        }
    }))
}

fn gen_matrix(
    kind: MatrixKind,
    n: usize,
    m: usize,
    terms: Option<usize>,
    seed: u64,
) -> CliResult<Dictionary> {
    let seed = derive_seed(seed, &[1]);
    Ok(match kind {
        MatrixKind::Gaussian => experiments::gen_gaussian_dictionary(n, m, seed)?,
        MatrixKind::Correlated => {
            experiments::gen_correlated_dictionary(n, m, terms.unwrap_or(n), seed)?
        }
    })
}

fn recover(a: &RecoverArgs, g: &Global) -> CliResult<Report> {
    let mut report = Report::new();
    report.set("algorithm", a.alg);
    let (dict, y, truth) = match (&a.problem, a.gen) {
        (Some(path), _) => {
            let data = experiments::load_dataset(path, None)?;
            let (dict, _) = Dictionary::normalize(data.features)?;
            report.set("problem", path.display());
            (dict, data.response, None)
        }
        (None, Some(kind)) => {
            let spec = ProblemSpec {
                kind,
                n: a.n,
                m: a.m,
                k: a.k,
                noise: a.noise,
                terms: a.terms,
            };
            let p = RecoveryProblem::generate(&spec, g.seed)?;
            report.set("gen", kind);
            report.set("n", a.n);
            report.set("m", a.m);
            report.set("k", a.k);
            report.set("noise", a.noise);
            if kind == MatrixKind::Correlated {
                report.set("terms", a.terms.unwrap_or(a.n));
            }
            let default_delta = 2.0 * p.noise.norm();
            (p.dict, p.y, Some((p.support_true, default_delta)))
        }
        (None, None) => return usage("recover needs --problem or --gen"),
    };
    let delta = match (a.delta, &truth) {
        (Some(d), _) => d,
        (None, Some((_, d))) => *d,
        (None, None) => 0.0,
    };
    if !(delta >= 0.0 && delta.is_finite()) {
        return usage("--delta must be finite and >= 0");
    }
    let (support, iterations) = match a.target_sparsity {
        Some(t) => {
            report.set("target_sparsity", t);
            let stop = StopRule::TargetSparsity(t);
            let path = match a.alg {
                Algorithm::Omp => stepwise::omp(&dict, &y, stop)?,
                Algorithm::Fr => stepwise::forward_regression(&dict, &y, stop)?,
                Algorithm::Br => stepwise::backward_regression(&dict, &y, stop)?,
                other => return usage(format!("--target-sparsity is not supported by {other}")),
            };
            (path.support, path.iterations)
        }
        None => {
            report.set("delta", delta);
            let s = experiments::select(a.alg, &dict, &y, delta, &TrialParams::default())?;
            (s.support, s.iterations)
        }
    };
    let residual = if support.is_empty() {
        y.norm()
    } else {
        sparse_pursuit::linalg::ls_solve(&dict, &support, &y)?
            .1
            .norm()
    };
    let exact = truth
        .as_ref()
        .map_or(String::new(), |(t, _)| (*t == support).to_string());
    writeln!(
        report.body,
        "algorithm,support,residual_norm,iterations,exact_recovery"
    )?;
    writeln!(
        report.body,
        "{},{},{:e},{},{}",
        a.alg,
        join(&support),
        residual,
        iterations,
        exact
    )?;
    Ok(report)
}

fn bounds(a: &BoundsArgs, g: &Global) -> CliResult<Report> {
    let mut report = Report::new();
    let dict = if let Some(n) = a.identity {
        report.set("matrix", format!("identity {n}"));
        Dictionary::new(DMatrix::identity(n, n))?
    } else if let Some(path) = &a.matrix {
        report.set("matrix", path.display());
        let (dict, norms) = Dictionary::normalize(load_matrix(path)?)?;
        if norms.iter().any(|v| (v - 1.0).abs() > 1e-12) {
            report.set("normalized", true);
        }
        dict
    } else if let Some(kind) = a.gen {
        report.set("matrix", format!("{kind} {}x{}", a.n, a.m));
        gen_matrix(kind, a.n, a.m, a.terms, g.seed)?
    } else {
        return usage("bounds needs --matrix, --gen or --identity");
    };
    if a.k >= dict.ncols() {
        return usage(format!(
            "--k must be below the number of columns ({})",
            dict.ncols()
        ));
    }
    report.set("k", a.k);
    report.set("x_min", a.x_min);
    if let Some(s) = &a.support {
        report.set("support", join(s));
    }
    let r = guarantees::guarantee_report(&dict, a.k, a.x_min, a.support.as_deref(), &a.deltas)?;
    let out = &mut report.body;
    writeln!(out, "quantity,delta,value")?;
    writeln!(out, "mu,,{:e}", r.mu)?;
    for (j, v) in &r.mu1 {
        writeln!(out, "mu1_{j},,{v:e}")?;
    }
    if let Some(e) = r.erc_value {
        writeln!(out, "erc,,{e:e}")?;
    }
    writeln!(out, "fwd_bound,,{:e}", r.fwd_bound)?;
    writeln!(out, "bwd_bound,,{:e}", r.bwd_bound)?;
    writeln!(out, "superset_bound,,{:e}", r.superset_bound)?;
    for p in &r.prob_bounds {
        writeln!(out, "prob_bound1,{},{:e}", p.delta, p.bound1)?;
        if let Some(b) = p.bound2 {
            writeln!(out, "prob_bound2,{},{b:e}", p.delta)?;
        }
        writeln!(out, "baseline,{},{:e}", p.delta, p.baseline)?;
    }
    Ok(report)
}

fn check_trials(trials: usize) -> CliResult<()> {
    if trials == 0 {
        return usage("--trials must be at least 1");
    }
    Ok(())
}

fn phase(a: &PhaseArgs, g: &Global) -> CliResult<Report> {
    check_trials(a.trials)?;
    let mut config = PhaseConfig {
        kind: a.matrix,
        m: a.m,
        trials: a.trials,
        noise: a.noise,
        terms: a.terms,
        seed: g.seed,
        ..PhaseConfig::default()
    };
    if let Some(v) = &a.n_ratios {
        config.n_ratios = v.clone();
    }
    if let Some(v) = &a.k_ratios {
        config.k_ratios = v.clone();
    }
    if let Some(v) = &a.algs {
        config.algorithms = v.clone();
    }
    let mut report = Report::new();
    report.set("matrix", config.kind);
    report.set("m", config.m);
    report.set("n_ratios", join(&config.n_ratios));
    report.set("k_ratios", join(&config.k_ratios));
    report.set("trials", config.trials);
    report.set("noise", config.noise);
    report.set("algorithms", join(&config.algorithms));
    let cells = experiments::phase_grid(&config)?;
    experiments::write_grid_csv(&mut report.body, &cells)?;
    if let Some(path) = &a.svg {
        fs::write(path, svg::phase_heatmap(&cells, &config.algorithms))?;
    }
    Ok(report)
}

fn table(a: &TableArgs, g: &Global) -> CliResult<Report> {
    let mut config = match a.preset {
        Preset::Table1 => TableConfig::table1(),
        Preset::Table2 => TableConfig::table2(),
    };
    config.seed = g.seed;
    if let Some(ks) = &a.ks {
        config.ks = ks.clone();
    }
    if let Some(algs) = &a.algs {
        config.algorithms = algs.clone();
    }
    if let Some(t) = a.trials {
        check_trials(t)?;
        config.trials = t;
    }
    if let Some(noise) = a.noise {
        config.noise = noise;
    }
    let mut report = Report::new();
    report.set(
        "matrix",
        format!("{} {}x{}", config.kind, config.n, config.m),
    );
    report.set("ks", join(&config.ks));
    report.set("trials", config.trials);
    report.set("noise", config.noise);
    report.set("algorithms", join(&config.algorithms));
    let records = experiments::table_trials(&config)?;
    let rows = experiments::summarize_table(&config, &records);
    experiments::write_table_csv(&mut report.body, &rows)?;
    if let Some(path) = &a.trials_csv {
        let mut buf = Vec::new();
        experiments::write_trials_csv(&mut buf, &records, g.deterministic)?;
        fs::write(path, buf)?;
    }
    Ok(report)
}

/// `c · σ_y · √n_train · 0.7^j` for twelve steps.
fn default_deltas(data: &Dataset, train_fraction: f64) -> Vec<f64> {
    let y = &data.response;
    let n = y.len().max(1) as f64;
    let mean = y.sum() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = sd * (n * train_fraction).sqrt();
    (0..12).map(|j| 0.8 * scale * 0.7f64.powi(j)).collect()
}

fn kernel(a: &KernelArgs, g: &Global) -> CliResult<Report> {
    if let Some(ell) = a.ell {
        if !(ell > 0.0 && ell.is_finite()) {
            return usage("--ell must be positive");
        }
    }
    if a.splits == 0 {
        return usage("--splits must be at least 1");
    }
    let mut report = Report::new();
    let data = match (&a.data, a.synthetic) {
        (Some(path), _) => {
            report.set("data", path.display());
            experiments::load_dataset(path, a.response_col)?
        }
        (None, true) => {
            report.set("data", "synthetic 300x2");
            experiments::synthetic_kernel_dataset(300, 2, 8, 0.05, 0.8, derive_seed(g.seed, &[9]))?
                .0
        }
        (None, false) => return usage("kernel needs --data or --synthetic"),
    };
    let config = KernelConfig {
        split_seeds: (0..a.splits).map(|s| derive_seed(g.seed, &[s])).collect(),
        deltas: a
            .deltas
            .clone()
            .unwrap_or_else(|| default_deltas(&data, a.train_fraction)),
        ell: a.ell,
        algorithms: a.algs.clone().unwrap_or_else(|| Algorithm::KERNEL.to_vec()),
        train_fraction: a.train_fraction,
        standardize: !a.no_standardize,
        center: !a.no_center,
        pinned_train: Vec::new(),
        params: TrialParams::default(),
    };
    report.set("rows", data.len());
    report.set("features", data.features.ncols());
    report.set("splits", a.splits);
    report.set("deltas", join(&config.deltas));
    report.set(
        "ell",
        config.ell.unwrap_or((data.features.ncols() as f64).sqrt()),
    );
    report.set("algorithms", join(&config.algorithms));
    report.set("train_fraction", config.train_fraction);
    report.set("standardize", config.standardize);
    report.set("center", config.center);
    let result = experiments::kernel_regression_experiment(&data, &config)?;
    for (alg, split, delta, msg) in &result.failures {
        eprintln!("warning: {alg} split {split} delta {delta}: {msg}");
    }
    report.set("failures", result.failures.len());
    experiments::write_kernel_csv(&mut report.body, &result.points)?;
    if let Some(path) = &a.svg {
        fs::write(
            path,
            svg::sparsity_scatter(&result.points, &config.algorithms),
        )?;
    }
    Ok(report)
}

fn bench(a: &BenchArgs, g: &Global) -> CliResult<Report> {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return usage("--sizes must be positive");
    }
    if !(a.n_ratio > 0.0 && a.k_ratio > 0.0) {
        return usage("--n-ratio and --k-ratio must be positive");
    }
    let algs = a.algs.clone().unwrap_or_else(|| Algorithm::TABLE.to_vec());
    let mut report = Report::new();
    report.set("sizes", join(&a.sizes));
    report.set("n_ratio", a.n_ratio);
    report.set("k_ratio", a.k_ratio);
    report.set("algorithms", join(&algs));
    report.set("repeats", a.repeats);
    report.set("noise", a.noise);
    let rows = experiments::benchmark(
        &a.sizes, a.n_ratio, a.k_ratio, &algs, a.repeats, a.noise, g.seed,
    )?;
    experiments::write_bench_csv(&mut report.body, &rows, g.deterministic)?;
    Ok(report)
}
