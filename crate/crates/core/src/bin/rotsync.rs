use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rotsync::eval::{
    align, error_report, run_sweep_with, LambdaPolicy, SolverSettings, SweepRow, SweepSpec,
    SweepVariable, EvalError,
};
use rotsync::io::{self as formats, FormatError};
use rotsync::sync::{
    assemble, solve_eig, solve_eig_irls, solve_rgodec, EdgeLabel, IrlsOptions, Lambda, Method,
    ResidualScale, RgodecSyncOptions, SyncError, CAUCHY_C,
};
use rotsync::synth::{generate, GroundTruthMode, SynthConfig, SynthError};

const EXIT_USAGE: u8 = 2;
const EXIT_FILE: u8 = 3;
const EXIT_DISCONNECTED: u8 = 4;
const EXIT_SOLVER: u8 = 5;
const EXIT_LENGTH: u8 = 6;

const EVAL_HEADER: &str = "method_tag,n,mean_deg,median_deg,max_deg,runtime_s";
const BENCH_HEADER: &str = "method,variable,value,trial,mean_deg,median_deg,runtime_s";

#[derive(Parser)]
#[command(name = "rotsync", version, about = "Rotation synchronization by low-rank and sparse decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic instance (.rel, .gt and .outliers files)
    Synth(SynthArgs),
    /// Estimate absolute rotations from a measurement file
    Solve(SolveArgs),
    /// Compare estimated rotations with ground truth and append a CSV row
    Eval(EvalArgs),
    /// Run a synthetic benchmark sweep and write a CSV table
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Euler,
    Haar,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Rgodec,
    Eig,
    EigIrls,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rgodec => Method::RGoDec,
            MethodArg::Eig => Method::Eig,
            MethodArg::EigIrls => Method::EigIrls,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    /// Residuals standardized by median / 0.6745
    Mad,
    /// Raw chordal residuals
    Unit,
}

impl From<ScaleArg> for ResidualScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Mad => IrlsOptions::default().scale,
            ScaleArg::Unit => ResidualScale::Unit,
        }
    }
}

#[derive(Clone, Copy)]
enum LambdaArg {
    Auto,
    Value(f64),
}

fn parse_lambda(s: &str) -> Result<LambdaArg, String> {
    if s == "auto" {
        return Ok(LambdaArg::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(LambdaArg::Value(v)),
        _ => Err(format!("expected 'auto' or a non-negative number, got '{s}'")),
    }
}

#[derive(Clone, Copy)]
enum SigmaArg {
    Matched,
    Value(f64),
}

fn parse_sigma(s: &str) -> Result<SigmaArg, String> {
    if s == "matched" {
        return Ok(SigmaArg::Matched);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(SigmaArg::Value(v)),
        _ => Err(format!("expected 'matched' or a non-negative number, got '{s}'")),
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1], got '{s}'")),
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got '{s}'")),
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    /// Expected fraction of missing pairs, in [0, 1)
    #[arg(long, default_value_t = 0.0, value_parser = parse_fraction)]
    missing: f64,
    /// Fraction of measured edges replaced by random rotations
    #[arg(long, default_value_t = 0.0, value_parser = parse_fraction)]
    outliers: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_min_deg: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_max_deg: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Euler)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output files are <prefix>.rel, <prefix>.gt and <prefix>.outliers
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct IrlsArgs {
    /// Maximum number of reweighting rounds of eig-irls
    #[arg(long, default_value_t = 20)]
    irls_rounds: usize,
    /// Cauchy tuning constant of eig-irls
    #[arg(long, default_value_t = CAUCHY_C, value_parser = parse_positive)]
    irls_c: f64,
    /// Residual scaling of eig-irls
    #[arg(long, value_enum, default_value_t = ScaleArg::Mad)]
    irls_scale: ScaleArg,
}

impl IrlsArgs {
    fn options(&self) -> IrlsOptions {
        IrlsOptions { max_rounds: self.irls_rounds.max(1), c: self.irls_c, scale: self.irls_scale.into(), ..IrlsOptions::default() }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Rgodec)]
    method: MethodArg,
    /// Measurement file (.rel)
    #[arg(long)]
    input: PathBuf,
    /// Rotation file to write (.est)
    #[arg(long)]
    output: PathBuf,
    /// R-GoDec regularization: 'auto' (sigma * sqrt(2 ln m)) or a value
    #[arg(long, default_value = "auto", value_parser = parse_lambda)]
    lambda: LambdaArg,
    /// Noise level used by --lambda auto
    #[arg(long, default_value_t = 0.02)]
    sigma: f64,
    /// Relative squared residual at which R-GoDec stops
    #[arg(long, default_value_t = 1e-10, value_parser = parse_positive)]
    eps: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Seed of the randomized low-rank step
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write one 'i j inlier|outlier' line per edge
    #[arg(long)]
    labels_out: Option<PathBuf>,
    #[command(flatten)]
    irls: IrlsArgs,
    /// Report a runtime of 0 so that output is reproducible
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated rotations
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth rotations
    #[arg(long)]
    gt: PathBuf,
    /// CSV file to append to
    #[arg(long)]
    csv_out: PathBuf,
    /// Tag written in the method_tag column
    #[arg(long, default_value = "est")]
    method: String,
    /// Runtime in seconds written in the runtime_s column
    #[arg(long, default_value_t = 0.0)]
    runtime: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["noise", "outliers", "n"]))]
    sweep: String,
    /// Comma-separated increasing grid values
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.5, value_parser = parse_fraction)]
    missing: f64,
    /// Fixed perturbation angle of inlier measurements
    #[arg(long, default_value_t = 5.0)]
    noise_deg: f64,
    #[arg(long, default_value_t = 0.0, value_parser = parse_fraction)]
    outliers: f64,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Comma-separated list of rgodec, eig, eig-irls
    #[arg(long, value_delimiter = ',', value_enum, default_values = ["rgodec", "eig", "eig-irls"])]
    methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv_out: PathBuf,
    /// Noise level of the R-GoDec threshold: 'matched' to the instance noise or a value
    #[arg(long, default_value = "matched", value_parser = parse_sigma)]
    sigma: SigmaArg,
    /// Relative squared residual at which R-GoDec stops; noisy instances
    /// never reach it and run --max-iter iterations
    #[arg(long, default_value_t = 1e-20, value_parser = parse_positive)]
    eps: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[command(flatten)]
    irls: IrlsArgs,
    /// Report runtimes of 0 so that output is reproducible
    #[arg(long)]
    no_timing: bool,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

fn file_error(path: &Path, e: FormatError) -> CliError {
    CliError::new(EXIT_FILE, format!("{}: {e}", path.display()))
}

fn write_error(path: &Path, e: io::Error) -> CliError {
    CliError::new(EXIT_FILE, format!("{}: {e}", path.display()))
}

impl From<SyncError> for CliError {
    fn from(e: SyncError) -> Self {
        let code = match e {
            SyncError::DisconnectedGraph => EXIT_DISCONNECTED,
            SyncError::DuplicateEdge(..) | SyncError::InvalidEdge { .. } | SyncError::NoFrames => EXIT_FILE,
            _ => EXIT_SOLVER,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::new(EXIT_USAGE, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::LengthMismatch { .. } => EXIT_LENGTH,
            EvalError::Empty => EXIT_FILE,
            EvalError::InvalidSweep(_) => EXIT_USAGE,
        };
        CliError::new(code, e.to_string())
    }
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        n: args.n,
        missing_fraction: args.missing,
        outlier_fraction: args.outliers,
        noise_min_deg: args.noise_min_deg,
        noise_max_deg: args.noise_max_deg,
        mode: match args.mode {
            ModeArg::Euler => GroundTruthMode::Euler,
            ModeArg::Haar => GroundTruthMode::Haar,
        },
        seed: args.seed,
    };
    let (set, gt) = generate(&config)?;

    let rel = with_extension(&args.out_prefix, "rel");
    let gt_path = with_extension(&args.out_prefix, "gt");
    let outliers = with_extension(&args.out_prefix, "outliers");
    formats::create(&rel)
        .and_then(|f| formats::write_measurements(f, &set))
        .map_err(|e| write_error(&rel, e))?;
    formats::create(&gt_path)
        .and_then(|f| formats::write_rotations(f, &gt.rotations))
        .map_err(|e| write_error(&gt_path, e))?;
    formats::create(&outliers)
        .and_then(|f| formats::write_edge_list(f, &gt.outlier_edges))
        .map_err(|e| write_error(&outliers, e))?;
    println!(
        "n={} edges={} outliers={} files={},{},{}",
        set.n(),
        set.len(),
        gt.outlier_edges.len(),
        rel.display(),
        gt_path.display(),
        outliers.display()
    );
    Ok(())
}

fn run_solve(args: &SolveArgs) -> Result<(), CliError> {
    let loaded = formats::load_measurements(&args.input).map_err(|e| file_error(&args.input, e))?;
    let obs = assemble(&loaded.value)?;
    let method = Method::from(args.method);
    let solution = match method {
        Method::RGoDec => {
            if args.max_iter == 0 {
                return Err(CliError::new(EXIT_USAGE, "--max-iter must be positive"));
            }
            let lambda = match args.lambda {
                LambdaArg::Auto => Lambda::Auto { sigma: args.sigma },
                LambdaArg::Value(v) => Lambda::Explicit(v),
            };
            let opts = RgodecSyncOptions { lambda, eps: args.eps, max_iter: args.max_iter, ..Default::default() };
            solve_rgodec(&obs, &opts, &mut ChaCha8Rng::seed_from_u64(args.seed))?
        }
        Method::Eig => solve_eig(&obs, None)?,
        Method::EigIrls => solve_eig_irls(&obs, &args.irls.options())?,
    };

    formats::create(&args.output)
        .and_then(|f| formats::write_rotations(f, &solution.rotations))
        .map_err(|e| write_error(&args.output, e))?;
    if let Some(path) = &args.labels_out {
        formats::create(path)
            .and_then(|f| formats::write_labels(f, obs.edges(), &solution.edge_labels))
            .map_err(|e| write_error(path, e))?;
    }

    let outliers = solution.edge_labels.iter().filter(|&&l| l == EdgeLabel::Outlier).count();
    let runtime = if args.no_timing { 0.0 } else { solution.runtime_seconds };
    let lambda = solution.lambda.map_or_else(|| "none".to_string(), |l| l.to_string());
    println!(
        "method={} n={} edges={} iterations={} runtime_s={} objective={} lambda={} outliers={} projected_inputs={}",
        method,
        obs.n(),
        obs.edges().len(),
        solution.iterations,
        runtime,
        solution.final_objective(),
        lambda,
        outliers,
        loaded.projected
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let est = formats::load_rotations(&args.est).map_err(|e| file_error(&args.est, e))?;
    let gt = formats::load_rotations(&args.gt).map_err(|e| file_error(&args.gt, e))?;
    let aligned = align(&est.value, &gt.value)?;
    let report = error_report(&aligned, &gt.value, args.runtime)?;
    if args.method.contains(',') || args.method.contains('\n') {
        return Err(CliError::new(EXIT_USAGE, "--method must not contain ',' or newlines"));
    }
    let row = format!(
        "{},{},{},{},{},{}",
        args.method,
        gt.value.len(),
        report.mean,
        report.median,
        report.max,
        report.runtime_seconds
    );

    let path = &args.csv_out;
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| write_error(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(EVAL_HEADER);
        text.push('\n');
    }
    text.push_str(&row);
    text.push('\n');
    file.write_all(text.as_bytes()).map_err(|e| write_error(path, e))?;
    println!("{row}");
    Ok(())
}

fn bench_line(variable: &str, row: &SweepRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        row.method, variable, row.value, row.trial, row.mean_deg, row.median_deg, row.runtime_s
    )
}

fn run_bench(args: &BenchArgs) -> Result<(), CliError> {
    let variable: SweepVariable = args.sweep.parse().map_err(|e: String| CliError::new(EXIT_USAGE, e))?;
    if args.max_iter == 0 {
        return Err(CliError::new(EXIT_USAGE, "--max-iter must be positive"));
    }
    let base = SynthConfig {
        n: args.n,
        missing_fraction: args.missing,
        outlier_fraction: args.outliers,
        noise_min_deg: args.noise_deg,
        noise_max_deg: args.noise_deg,
        mode: GroundTruthMode::Euler,
        seed: args.seed,
    };
    base.validate()?;
    let mut methods: Vec<Method> = Vec::new();
    for m in args.methods.iter().map(|&m| Method::from(m)) {
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let settings = SolverSettings {
        lambda: match args.sigma {
            SigmaArg::Matched => SolverSettings::default().lambda,
            SigmaArg::Value(s) => LambdaPolicy::Sigma(s),
        },
        rgodec: RgodecSyncOptions { eps: args.eps, max_iter: args.max_iter, ..Default::default() },
        irls: args.irls.options(),
    };
    let spec = SweepSpec {
        variable,
        grid: args.grid.clone(),
        base,
        trials: args.trials,
        methods,
        settings,
        record_timing: !args.no_timing,
    };
    spec.validate()?;

    // Trial rows are flushed as they are produced; the finished table is
    // rewritten in canonical order with the aggregates.
    let path = &args.csv_out;
    let mut partial = formats::create(path).map_err(|e| write_error(path, e))?;
    writeln!(partial, "{BENCH_HEADER}").map_err(|e| write_error(path, e))?;
    let mut stream_error = None;
    let rows = run_sweep_with(&spec, |row| {
        if let Some(msg) = &row.failure {
            eprintln!("{} at {}={} trial {}: {msg}", row.method, variable.name(), row.value, row.trial);
        }
        if stream_error.is_none() {
            stream_error = writeln!(partial, "{}", bench_line(variable.name(), row))
                .and_then(|_| partial.flush())
                .err();
        }
    })?;
    if let Some(e) = stream_error {
        return Err(write_error(path, e));
    }
    drop(partial);

    let mut table = String::from(BENCH_HEADER);
    table.push('\n');
    for row in &rows {
        table.push_str(&bench_line(variable.name(), row));
        table.push('\n');
    }
    std::fs::write(path, table).map_err(|e| write_error(path, e))?;

    let failed = rows.iter().filter(|r| r.is_failed()).count();
    println!("rows={} failed={} csv={}", rows.len(), failed, path.display());
    if failed > 0 {
        return Err(CliError::new(EXIT_SOLVER, format!("{failed} rows failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Solve(args) => run_solve(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
