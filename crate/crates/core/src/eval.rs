//! Alignment to ground truth, error statistics, and benchmark sweeps.

use std::cmp::Ordering;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::so3::{geodesic_distance, l1_single_average, RotationMatrix};
use crate::sync::{
    assemble, solve_eig, solve_eig_irls, solve_rgodec, BlockObservationMatrix, IrlsOptions, Lambda,
    Method, RgodecSyncOptions, SyncError, SyncSolution,
};
use crate::synth::{generate, SynthConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {estimates} estimates vs {ground_truth} ground-truth rotations")]
    LengthMismatch { estimates: usize, ground_truth: usize },
    #[error("no rotations to compare")]
    Empty,
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
}

fn check_lengths(est: &[RotationMatrix], gt: &[RotationMatrix]) -> Result<(), EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch { estimates: est.len(), ground_truth: gt.len() });
    }
    if est.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Removes the global gauge of `estimates` relative to `ground_truth`.
///
/// With `R_ij = R_i R_j^T`, solutions are determined up to a common right
/// factor `R_i -> R_i G`. The gauge is estimated as the L1 single mean
/// `S` of `{est_i^T gt_i}` and the aligned estimates are `{est_i S}`.
pub fn align(estimates: &[RotationMatrix], ground_truth: &[RotationMatrix]) -> Result<Vec<RotationMatrix>, EvalError> {
    check_lengths(estimates, ground_truth)?;
    let offsets: Vec<RotationMatrix> =
        estimates.iter().zip(ground_truth).map(|(e, t)| &e.transpose() * t).collect();
    let s = l1_single_average(&offsets).map_err(|_| EvalError::Empty)?;
    Ok(estimates.iter().map(|e| e * &s).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub per_node_errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Bin edges in degrees, one more than `histogram_counts`.
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<usize>,
    pub runtime_seconds: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    if m == 0 {
        return f64::NAN;
    }
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Per-node angular errors in degrees with summary statistics and a
/// histogram of 1 degree bins covering `[0, ceil(max)]`.
pub fn error_report(
    aligned: &[RotationMatrix],
    ground_truth: &[RotationMatrix],
    runtime_seconds: f64,
) -> Result<ErrorReport, EvalError> {
    check_lengths(aligned, ground_truth)?;
    let errors: Vec<f64> = aligned.iter().zip(ground_truth).map(|(a, t)| geodesic_distance(t, a)).collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let max = errors.iter().copied().fold(0.0, f64::max);
    let bins = (max.ceil() as usize).max(1);
    let mut counts = vec![0; bins];
    for &e in &errors {
        counts[(e.floor() as usize).min(bins - 1)] += 1;
    }
    Ok(ErrorReport {
        median: median(&errors),
        per_node_errors: errors,
        mean,
        max,
        histogram_edges: (0..=bins).map(|k| k as f64).collect(),
        histogram_counts: counts,
        runtime_seconds,
    })
}

/// Per-entry RMS of `R (N - I)` for a perturbation `N` of the given angle:
/// `||N - I||_F / 3 = 2 sqrt(2) sin(theta / 2) / 3`.
pub fn noise_sigma(angle_deg: f64) -> f64 {
    2.0 * 2f64.sqrt() * (angle_deg.to_radians() / 2.0).sin() / 3.0
}

/// Regularization policy of R-GoDec inside sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy {
    /// Universal threshold with a fixed noise level.
    Sigma(f64),
    /// Universal threshold with the noise level implied by the instance's
    /// noise range (its midpoint), never below `floor`.
    Matched { floor: f64 },
    Explicit(f64),
}

impl LambdaPolicy {
    pub fn lambda(&self, config: &SynthConfig) -> Lambda {
        match *self {
            LambdaPolicy::Sigma(sigma) => Lambda::Auto { sigma },
            LambdaPolicy::Matched { floor } => {
                let mid = 0.5 * (config.noise_min_deg + config.noise_max_deg);
                Lambda::Auto { sigma: noise_sigma(mid).max(floor) }
            }
            LambdaPolicy::Explicit(v) => Lambda::Explicit(v),
        }
    }
}

/// Solver settings shared by every cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub lambda: LambdaPolicy,
    pub rgodec: RgodecSyncOptions,
    pub irls: IrlsOptions,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            lambda: LambdaPolicy::Matched { floor: 0.02 },
            rgodec: RgodecSyncOptions::default(),
            irls: IrlsOptions::default(),
        }
    }
}

/// Runs one solver; `seed` drives the randomized low-rank step.
pub fn solve_with(
    method: Method,
    obs: &BlockObservationMatrix,
    settings: &SolverSettings,
    lambda: Lambda,
    seed: u64,
) -> Result<SyncSolution, SyncError> {
    match method {
        Method::RGoDec => {
            let opts = RgodecSyncOptions { lambda, ..settings.rgodec };
            solve_rgodec(obs, &opts, &mut ChaCha8Rng::seed_from_u64(seed))
        }
        Method::Eig => solve_eig(obs, None),
        Method::EigIrls => solve_eig_irls(obs, &settings.irls),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    /// Fixed perturbation angle in degrees.
    Noise,
    Outliers,
    N,
}

impl SweepVariable {
    pub fn name(&self) -> &'static str {
        match self {
            SweepVariable::Noise => "noise",
            SweepVariable::Outliers => "outliers",
            SweepVariable::N => "n",
        }
    }

    pub fn apply(&self, base: &SynthConfig, value: f64) -> SynthConfig {
        let mut cfg = base.clone();
        match self {
            SweepVariable::Noise => {
                cfg.noise_min_deg = value;
                cfg.noise_max_deg = value;
            }
            SweepVariable::Outliers => cfg.outlier_fraction = value,
            SweepVariable::N => cfg.n = value.round() as usize,
        }
        cfg
    }
}

impl std::str::FromStr for SweepVariable {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(Self::Noise),
            "outliers" => Ok(Self::Outliers),
            "n" => Ok(Self::N),
            other => Err(format!("unknown sweep variable '{other}' (expected noise, outliers or n)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
    /// Base configuration; its seed is the base seed of the sweep.
    pub base: SynthConfig,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub settings: SolverSettings,
    /// When false, runtimes are reported as zero so tables are reproducible.
    pub record_timing: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.trials == 0 {
            return Err(EvalError::InvalidSweep("trials must be at least 1".into()));
        }
        if self.grid.is_empty() {
            return Err(EvalError::InvalidSweep("grid is empty".into()));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(EvalError::InvalidSweep("grid must be strictly increasing".into()));
        }
        if self.methods.is_empty() {
            return Err(EvalError::InvalidSweep("no methods selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Trial {
    Index(usize),
    Average,
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trial::Index(k) => write!(f, "{k}"),
            Trial::Average => f.write_str("avg"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub value: f64,
    pub trial: Trial,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub runtime_s: f64,
    pub iterations: usize,
    /// Set when the solver or the generator failed for this cell.
    pub failure: Option<String>,
}

impl SweepRow {
    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the instance at `(grid_index, trial_index)`; all methods share it.
pub fn cell_seed(base: u64, grid_index: usize, trial_index: usize) -> u64 {
    mix(mix(mix(base) ^ grid_index as u64) ^ trial_index as u64)
}

fn failed_row(method: Method, value: f64, trial: Trial, message: String) -> SweepRow {
    SweepRow {
        method,
        value,
        trial,
        mean_deg: f64::NAN,
        median_deg: f64::NAN,
        runtime_s: f64::NAN,
        iterations: 0,
        failure: Some(message),
    }
}

fn run_cell(spec: &SweepSpec, value: f64, cfg: &SynthConfig, trial: usize, out: &mut Vec<SweepRow>) {
    let instance = generate(cfg)
        .map_err(|e| e.to_string())
        .and_then(|(set, gt)| assemble(&set).map(|obs| (obs, gt)).map_err(|e| e.to_string()));
    let (obs, gt) = match instance {
        Ok(x) => x,
        Err(msg) => {
            for &m in &spec.methods {
                out.push(failed_row(m, value, Trial::Index(trial), msg.clone()));
            }
            return;
        }
    };
    let lambda = spec.settings.lambda.lambda(cfg);
    for &method in &spec.methods {
        let row = solve_with(method, &obs, &spec.settings, lambda, mix(cfg.seed))
            .map_err(|e| e.to_string())
            .and_then(|sol| {
                let aligned = align(&sol.rotations, &gt.rotations).map_err(|e| e.to_string())?;
                let runtime = if spec.record_timing { sol.runtime_seconds } else { 0.0 };
                let report = error_report(&aligned, &gt.rotations, runtime).map_err(|e| e.to_string())?;
                Ok(SweepRow {
                    method,
                    value,
                    trial: Trial::Index(trial),
                    mean_deg: report.mean,
                    median_deg: report.median,
                    runtime_s: runtime,
                    iterations: sol.iterations,
                    failure: None,
                })
            });
        out.push(row.unwrap_or_else(|msg| failed_row(method, value, Trial::Index(trial), msg)));
    }
}

/// Averages the successful trial rows of each (method, value) pair.
fn aggregate(rows: &[SweepRow], methods: &[Method], grid: &[f64]) -> Vec<SweepRow> {
    let mut out = Vec::new();
    for &method in methods {
        for &value in grid {
            let ok: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.method == method && r.value == value && !r.is_failed())
                .collect();
            if ok.is_empty() {
                out.push(failed_row(method, value, Trial::Average, "all trials failed".into()));
                continue;
            }
            let k = ok.len() as f64;
            let avg = |f: fn(&SweepRow) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / k;
            out.push(SweepRow {
                method,
                value,
                trial: Trial::Average,
                mean_deg: avg(|r| r.mean_deg),
                median_deg: avg(|r| r.median_deg),
                runtime_s: avg(|r| r.runtime_s),
                iterations: (ok.iter().map(|r| r.iterations).sum::<usize>() as f64 / k).round() as usize,
                failure: None,
            });
        }
    }
    out
}

/// Generates one instance per (grid value, trial), solves it with every
/// method, and returns per-trial rows plus per-value averages, sorted by
/// method tag, value, then trial (averages last).
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, EvalError> {
    run_sweep_with(spec, |_| {})
}

/// As [`run_sweep`], calling `progress` after each trial row is produced.
pub fn run_sweep_with(spec: &SweepSpec, mut progress: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>, EvalError> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.grid.len() * spec.trials * spec.methods.len());
    for (gi, &value) in spec.grid.iter().enumerate() {
        for trial in 0..spec.trials {
            let mut cfg = spec.variable.apply(&spec.base, value);
            cfg.seed = cell_seed(spec.base.seed, gi, trial);
            let start = rows.len();
            run_cell(spec, value, &cfg, trial, &mut rows);
            rows[start..].iter().for_each(&mut progress);
        }
    }
    let mut all = aggregate(&rows, &spec.methods, &spec.grid);
    all.extend(rows);
    all.sort_by(|a, b| {
        a.method
            .tag()
            .cmp(b.method.tag())
            .then(a.value.partial_cmp(&b.value).unwrap_or(Ordering::Equal))
            .then(a.trial.cmp(&b.trial))
    });
    Ok(all)
}
