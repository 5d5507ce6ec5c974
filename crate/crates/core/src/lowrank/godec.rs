use rand::Rng;

use super::approx::{brp_with_basis, DEFAULT_POWER_ITERS};
use super::shrink::{block_shrink_in_place, hard_threshold_topk, shrink_scalar};
use super::{block_l21_norm, l1_norm, DenseMatrix, LowRankError, SparsityPattern};

/// How the sparse term of plain GoDec is controlled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsityControl {
    /// Keep the `k` largest residual entries (hard thresholding).
    Cardinality(usize),
    /// L1 weight for soft thresholding.
    Weight(f64),
}

/// Penalty on the outlier term of robust completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkMode {
    /// Entry-wise L1.
    Scalar,
    /// Sum of Frobenius norms of 3x3 blocks.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GodecOptions {
    pub rank: usize,
    /// Stop once `||P(X) - L - S1 - S2||^2 / ||P(X)||^2 <= eps`.
    pub eps: f64,
    pub max_iter: usize,
    pub power_iters: usize,
}

impl GodecOptions {
    pub fn new(rank: usize) -> Self {
        Self { rank, eps: 1e-10, max_iter: 100, power_iters: DEFAULT_POWER_ITERS }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_power_iters(mut self, power_iters: usize) -> Self {
        self.power_iters = power_iters;
        self
    }
}

/// `P(X) = L + S1 + S2 + N`: low-rank term, outlier term supported on the
/// pattern, completion term supported on its complement.
#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub low_rank: DenseMatrix,
    pub outliers: DenseMatrix,
    pub completion: DenseMatrix,
    /// Objective value after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    /// Relative squared residual at exit.
    pub relative_residual: f64,
    pub max_iter_exceeded: bool,
    /// Set when any rank-r step had to fall back to the exact SVD.
    pub used_fallback: bool,
}

impl DecompositionResult {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy)]
enum OutlierStep {
    None,
    TopK(usize),
    Soft(f64),
    Block(f64),
}

impl OutlierStep {
    fn penalty(&self, s1: &DenseMatrix) -> f64 {
        match *self {
            OutlierStep::None | OutlierStep::TopK(_) => 0.0,
            OutlierStep::Soft(lambda) => lambda * l1_norm(s1),
            OutlierStep::Block(lambda) => lambda * block_l21_norm(s1),
        }
    }

    // Exact minimizer of the objective over S1 given L, with the residual
    // already restricted to the pattern.
    fn apply(&self, mut residual: DenseMatrix) -> DenseMatrix {
        match *self {
            OutlierStep::None => {
                residual.fill(0.0);
                residual
            }
            OutlierStep::TopK(k) => hard_threshold_topk(&residual, k),
            OutlierStep::Soft(lambda) => {
                residual.apply(|x| *x = shrink_scalar(*x, lambda));
                residual
            }
            OutlierStep::Block(lambda) => {
                block_shrink_in_place(&mut residual, lambda);
                residual
            }
        }
    }
}

fn check_options(x: &DenseMatrix, opts: &GodecOptions) -> Result<(), LowRankError> {
    let (rows, cols) = x.shape();
    if opts.rank == 0 || opts.rank > rows.min(cols) {
        return Err(LowRankError::InvalidRank { rank: opts.rank, rows, cols });
    }
    if !(opts.eps > 0.0) {
        return Err(LowRankError::InvalidParameter(format!("eps must be positive, got {}", opts.eps)));
    }
    if opts.max_iter == 0 {
        return Err(LowRankError::InvalidParameter("max_iter must be positive".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LowRankError::InvalidParameter("data matrix has non-finite entries".into()));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<(), LowRankError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(LowRankError::InvalidParameter(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

fn check_pattern(x: &DenseMatrix, omega: &SparsityPattern) -> Result<(), LowRankError> {
    if omega.shape() != x.shape() {
        return Err(LowRankError::ShapeMismatch { expected: x.shape(), found: omega.shape() });
    }
    if !omega.contains_support_of(x) {
        return Err(LowRankError::DataOutsidePattern);
    }
    Ok(())
}

/// GoDec for robust PCA: `X = L + S` with `rank(L) <= r` and `S` sparse.
pub fn godec<R: Rng + ?Sized>(
    x: &DenseMatrix,
    sparsity: SparsityControl,
    opts: &GodecOptions,
    rng: &mut R,
) -> Result<DecompositionResult, LowRankError> {
    check_options(x, opts)?;
    let step = match sparsity {
        SparsityControl::Cardinality(k) => {
            if k > x.len() {
                return Err(LowRankError::InvalidParameter(format!(
                    "cardinality {k} exceeds {} entries",
                    x.len()
                )));
            }
            OutlierStep::TopK(k)
        }
        SparsityControl::Weight(lambda) => {
            check_lambda(lambda)?;
            OutlierStep::Soft(lambda)
        }
    };
    let full = SparsityPattern::full(x.nrows(), x.ncols());
    Ok(run(x, &full, step, opts, rng))
}

/// GoDec for matrix completion: `P(X) = L + S` with `supp(S)` the complement
/// of the pattern.
pub fn godec_mc<R: Rng + ?Sized>(
    x: &DenseMatrix,
    omega: &SparsityPattern,
    opts: &GodecOptions,
    rng: &mut R,
) -> Result<DecompositionResult, LowRankError> {
    check_options(x, opts)?;
    check_pattern(x, omega)?;
    Ok(run(x, omega, OutlierStep::None, opts, rng))
}

/// Robust completion: `P(X) = L + S1 + S2` with an outlier term on the
/// pattern (L1 or block L2,1 penalized) and a completion term on its
/// complement.
pub fn rgodec<R: Rng + ?Sized>(
    x: &DenseMatrix,
    omega: &SparsityPattern,
    lambda: f64,
    mode: ShrinkMode,
    opts: &GodecOptions,
    rng: &mut R,
) -> Result<DecompositionResult, LowRankError> {
    check_options(x, opts)?;
    check_pattern(x, omega)?;
    check_lambda(lambda)?;
    let step = match mode {
        ShrinkMode::Scalar => OutlierStep::Soft(lambda),
        ShrinkMode::Block => {
            let (rows, cols) = x.shape();
            if rows % 3 != 0 || cols % 3 != 0 {
                return Err(LowRankError::BadBlockShape { rows, cols });
            }
            OutlierStep::Block(lambda)
        }
    };
    Ok(run(x, omega, step, opts, rng))
}

// Block-coordinate descent shared by all variants. `data` is already zero
// off the pattern.
fn run<R: Rng + ?Sized>(
    data: &DenseMatrix,
    omega: &SparsityPattern,
    step: OutlierStep,
    opts: &GodecOptions,
    rng: &mut R,
) -> DecompositionResult {
    let (rows, cols) = data.shape();
    let denom = data.norm_squared();
    let complete = omega.is_full();

    let mut low_rank = data.clone();
    let mut s1 = DenseMatrix::zeros(rows, cols);
    let mut s2 = DenseMatrix::zeros(rows, cols);
    let mut basis: Option<DenseMatrix> = None;
    let mut trace = Vec::with_capacity(opts.max_iter);
    let mut used_fallback = false;
    let mut relative_residual = f64::INFINITY;
    let mut iterations = 0;

    // The initial state L = P(X) has zero residual, so at least one sweep
    // runs before the stopping rule is consulted.
    while iterations < opts.max_iter {
        iterations += 1;

        // L-step: rank-r approximation of P(X) - S1 - S2.
        let target = data - &s1 - &s2;
        let sketch = brp_with_basis(&target, opts.rank, opts.power_iters, rng)
            .expect("rank validated before iterating");
        used_fallback |= sketch.used_fallback;
        let mut candidate = (sketch.matrix, sketch.basis);
        if let Some(prev) = basis.take() {
            // The previous column space is feasible; keep it when the fresh
            // sketch does worse so the objective never increases.
            let reprojected = &prev * prev.tr_mul(&target);
            if (&target - &reprojected).norm_squared() < (&target - &candidate.0).norm_squared() {
                candidate = (reprojected, prev);
            }
        }
        low_rank = candidate.0;
        basis = Some(candidate.1);

        // S1-step on the pattern, S2-step on its complement.
        let mut residual = data - &low_rank;
        if !complete {
            omega.project_in_place(&mut residual);
        }
        s1 = step.apply(residual);
        if !complete {
            s2 = -omega.project_complement(&low_rank);
        }

        let remainder = data - &low_rank - &s1 - &s2;
        let sq = remainder.norm_squared();
        trace.push(0.5 * sq + step.penalty(&s1));
        relative_residual = if denom > 0.0 { sq / denom } else { 0.0 };
        if relative_residual <= opts.eps {
            break;
        }
    }

    DecompositionResult {
        low_rank,
        outliers: s1,
        completion: s2,
        objective_trace: trace,
        iterations,
        relative_residual,
        max_iter_exceeded: relative_residual > opts.eps,
        used_fallback,
    }
}
