//! Rotation synchronization: the block observation matrix and the solvers
//! that recover absolute rotations from it.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3};
use rand::Rng;
use thiserror::Error;

use crate::lowrank::{
    auto_lambda, rgodec, DenseMatrix, GodecOptions, LowRankError, ShrinkMode, SparsityPattern,
    DEFAULT_POWER_ITERS,
};
use crate::eval::median;
use crate::so3::{project_to_so3, RotationMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("measurement graph is not connected")]
    DisconnectedGraph,
    #[error("duplicate measurement for pair ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("invalid edge ({i}, {j}) for {n} frames")]
    InvalidEdge { i: usize, j: usize, n: usize },
    #[error("a measurement set needs at least one frame")]
    NoFrames,
    #[error("node {0} has zero degree")]
    ZeroDegreeNode(usize),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid solver parameter: {0}")]
    InvalidParameter(String),
    #[error("extracted block for node {0} is rank deficient")]
    ExtractionDegenerate(usize),
    #[error(transparent)]
    Decomposition(#[from] LowRankError),
}

/// One relative rotation `R_ij ~ R_i R_j^T` with `i < j` (0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeMeasurement {
    pub i: usize,
    pub j: usize,
    pub rotation: RotationMatrix,
}

/// Edge list of pairwise rotations over `n` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeMeasurementSet {
    n: usize,
    edges: Vec<RelativeMeasurement>,
}

impl RelativeMeasurementSet {
    /// Checks index bounds and orientation (`i < j < n`). Duplicates and
    /// connectivity are checked by [`assemble`].
    pub fn new(n: usize, edges: Vec<RelativeMeasurement>) -> Result<Self, SyncError> {
        if n == 0 {
            return Err(SyncError::NoFrames);
        }
        for e in &edges {
            if e.i >= e.j || e.j >= n {
                return Err(SyncError::InvalidEdge { i: e.i, j: e.j, n });
            }
        }
        Ok(Self { n, edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[RelativeMeasurement] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Errors on duplicate pairs or a disconnected graph.
    pub fn validate(&self) -> Result<(), SyncError> {
        let mut seen = HashSet::with_capacity(self.edges.len());
        for e in &self.edges {
            if !seen.insert((e.i, e.j)) {
                return Err(SyncError::DuplicateEdge(e.i, e.j));
            }
        }
        let pairs: Vec<(usize, usize)> = self.edges.iter().map(|e| (e.i, e.j)).collect();
        if !is_connected(self.n, &pairs) {
            return Err(SyncError::DisconnectedGraph);
        }
        Ok(())
    }
}

/// Union-find connectivity check over `n` nodes.
pub fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    // a connected graph needs n - 1 edges; also avoids allocating for absurd n
    if n == 0 || edges.len() < n - 1 {
        return false;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut components = n;
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components == 1
}

/// The `3n x 3n` data matrix with identity diagonal blocks, its pattern
/// `A (x) 1_3x3`, and the `n x n` adjacency `A` (diagonal included).
#[derive(Debug, Clone)]
pub struct BlockObservationMatrix {
    n: usize,
    data: DenseMatrix,
    pattern: SparsityPattern,
    adjacency: DMatrix<f64>,
    edges: Vec<(usize, usize)>,
}

impl BlockObservationMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &DenseMatrix {
        &self.data
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Measured pairs in input order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn block(&self, i: usize, j: usize) -> Matrix3<f64> {
        self.data.fixed_view::<3, 3>(3 * i, 3 * j).into_owned()
    }

    /// Number of specified scalar entries (9 per observed block, diagonal included).
    pub fn observed_entries(&self) -> usize {
        9 * (self.n + 2 * self.edges.len())
    }

    /// Observed blocks per block row, diagonal included.
    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| self.adjacency.row(i).iter().filter(|&&a| a != 0.0).count())
            .collect()
    }
}

/// Builds the block observation matrix; `(i, j)` holds `R_ij`, `(j, i)` its transpose.
pub fn assemble(measurements: &RelativeMeasurementSet) -> Result<BlockObservationMatrix, SyncError> {
    measurements.validate()?;
    let n = measurements.n();
    let mut data = DenseMatrix::zeros(3 * n, 3 * n);
    let mut adjacency = DMatrix::zeros(n, n);
    for i in 0..n {
        data.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(&Matrix3::identity());
        adjacency[(i, i)] = 1.0;
    }
    for e in measurements.edges() {
        let r = e.rotation.matrix();
        data.fixed_view_mut::<3, 3>(3 * e.i, 3 * e.j).copy_from(r);
        data.fixed_view_mut::<3, 3>(3 * e.j, 3 * e.i).copy_from(&r.transpose());
        adjacency[(e.i, e.j)] = 1.0;
        adjacency[(e.j, e.i)] = 1.0;
    }
    let pattern = SparsityPattern::from_block_mask(n, |i, j| adjacency[(i, j)] != 0.0);
    let edges = measurements.edges().iter().map(|e| (e.i, e.j)).collect();
    Ok(BlockObservationMatrix { n, data, pattern, adjacency, edges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    RGoDec,
    Eig,
    EigIrls,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RGoDec, Method::Eig, Method::EigIrls];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::RGoDec => "rgodec",
            Method::Eig => "eig",
            Method::EigIrls => "eig-irls",
        }
    }

    pub fn is_robust(&self) -> bool {
        !matches!(self, Method::Eig)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgodec" => Ok(Method::RGoDec),
            "eig" => Ok(Method::Eig),
            "eig-irls" => Ok(Method::EigIrls),
            other => Err(format!("unknown method '{other}' (expected rgodec, eig or eig-irls)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeLabel {
    Inlier,
    Outlier,
}

#[derive(Debug, Clone)]
pub struct SyncSolution {
    /// Absolute rotations with the first one fixed to the identity.
    pub rotations: Vec<RotationMatrix>,
    /// One label per measured edge, in input order.
    pub edge_labels: Vec<EdgeLabel>,
    pub method: Method,
    pub iterations: usize,
    pub runtime_seconds: f64,
    pub objective_trace: Vec<f64>,
    /// Regularization weight used by R-GoDec.
    pub lambda: Option<f64>,
    /// Final IRLS weight per edge.
    pub edge_weights: Option<Vec<f64>>,
}

impl SyncSolution {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }

    pub fn outlier_edges<'a>(&'a self, obs: &'a BlockObservationMatrix) -> impl Iterator<Item = (usize, usize)> + 'a {
        obs.edges()
            .iter()
            .zip(&self.edge_labels)
            .filter(|(_, l)| **l == EdgeLabel::Outlier)
            .map(|(e, _)| *e)
    }
}

/// How R-GoDec picks its regularization weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    /// `sigma * sqrt(2 ln m)` with `m` the number of observed scalar entries.
    Auto { sigma: f64 },
    Explicit(f64),
}

impl Lambda {
    pub fn resolve(&self, observed_entries: usize) -> f64 {
        match *self {
            Lambda::Auto { sigma } => auto_lambda(sigma, observed_entries.max(1)),
            Lambda::Explicit(value) => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgodecSyncOptions {
    pub lambda: Lambda,
    pub eps: f64,
    pub max_iter: usize,
    pub power_iters: usize,
    /// Blocks of the outlier term with a larger Frobenius norm flag their edge.
    pub outlier_threshold: f64,
}

impl Default for RgodecSyncOptions {
    fn default() -> Self {
        Self {
            lambda: Lambda::Auto { sigma: 0.02 },
            eps: 1e-10,
            max_iter: 100,
            power_iters: DEFAULT_POWER_ITERS,
            outlier_threshold: 1e-9,
        }
    }
}

/// R-GoDec synchronization: block-L2,1 robust completion of the observation
/// matrix with rank 3, then rotation extraction from one block column.
pub fn solve_rgodec<R: Rng + ?Sized>(
    obs: &BlockObservationMatrix,
    opts: &RgodecSyncOptions,
    rng: &mut R,
) -> Result<SyncSolution, SyncError> {
    if let Lambda::Auto { sigma } = opts.lambda {
        if !(sigma >= 0.0) {
            return Err(SyncError::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
        }
    }
    let start = Instant::now();
    let lambda = opts.lambda.resolve(obs.observed_entries());
    let godec_opts = GodecOptions::new(3)
        .with_eps(opts.eps)
        .with_max_iter(opts.max_iter)
        .with_power_iters(opts.power_iters);
    let result = rgodec(&obs.data, &obs.pattern, lambda, ShrinkMode::Block, &godec_opts, rng)?;

    let rotations = extract_rotations(obs, &result.low_rank)?;
    let edge_labels = obs
        .edges
        .iter()
        .map(|&(i, j)| {
            let norm = result.outliers.fixed_view::<3, 3>(3 * i, 3 * j).norm();
            if norm > opts.outlier_threshold {
                EdgeLabel::Outlier
            } else {
                EdgeLabel::Inlier
            }
        })
        .collect();

    Ok(SyncSolution {
        rotations,
        edge_labels,
        method: Method::RGoDec,
        iterations: result.iterations,
        runtime_seconds: start.elapsed().as_secs_f64(),
        objective_trace: result.objective_trace,
        lambda: Some(lambda),
        edge_weights: None,
    })
}

/// Projects the block column of the best-connected node onto SO(3).
pub fn extract_rotations(
    obs: &BlockObservationMatrix,
    low_rank: &DenseMatrix,
) -> Result<Vec<RotationMatrix>, SyncError> {
    let degrees = obs.degrees();
    // max degree, lowest index on ties
    let column = degrees
        .iter()
        .enumerate()
        .fold(0, |best, (k, &d)| if d > degrees[best] { k } else { best });
    let blocks = (0..obs.n)
        .map(|k| {
            project_to_so3(&low_rank.fixed_view::<3, 3>(3 * k, 3 * column).into_owned())
                .map_err(|_| SyncError::ExtractionDegenerate(k))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fix_gauge(blocks))
}

// Right-multiplies every rotation by the inverse of the first one.
fn fix_gauge(rotations: Vec<RotationMatrix>) -> Vec<RotationMatrix> {
    let Some(first) = rotations.first() else {
        return rotations;
    };
    let reference = first.transpose();
    let mut fixed: Vec<RotationMatrix> = rotations.iter().map(|r| r * &reference).collect();
    fixed[0] = RotationMatrix::identity();
    fixed
}

fn check_weights(obs: &BlockObservationMatrix, weights: &DMatrix<f64>) -> Result<(), SyncError> {
    let n = obs.n;
    if weights.shape() != (n, n) {
        return Err(SyncError::InvalidWeights(format!(
            "expected {n}x{n}, got {}x{}",
            weights.nrows(),
            weights.ncols()
        )));
    }
    for i in 0..n {
        for j in 0..n {
            let w = weights[(i, j)];
            if !(0.0..=1.0).contains(&w) {
                return Err(SyncError::InvalidWeights(format!("weight ({i}, {j}) = {w} outside [0, 1]")));
            }
            if (w - weights[(j, i)]).abs() > 1e-12 {
                return Err(SyncError::InvalidWeights(format!("weights not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Degree vector of the weighted adjacency (row sums, diagonal included).
pub fn weighted_degrees(obs: &BlockObservationMatrix, weights: Option<&DMatrix<f64>>) -> Vec<f64> {
    (0..obs.n)
        .map(|i| {
            (0..obs.n)
                .map(|j| obs.adjacency[(i, j)] * weights.map_or(1.0, |w| w[(i, j)]))
                .sum()
        })
        .collect()
}

/// Spectral relaxation: the three leading eigenvectors of
/// `(D (x) I_3)^-1 P(X)`, projected blockwise onto SO(3).
///
/// The degree-normalized matrix is similar to the symmetric
/// `D^-1/2 P(X) D^-1/2`, so its eigenvectors are obtained as `D^-1/2 U`
/// from the symmetric eigendecomposition.
pub fn solve_eig(
    obs: &BlockObservationMatrix,
    weights: Option<&DMatrix<f64>>,
) -> Result<SyncSolution, SyncError> {
    let start = Instant::now();
    let rotations = eig_rotations(obs, weights)?;
    Ok(SyncSolution {
        rotations,
        edge_labels: vec![EdgeLabel::Inlier; obs.edges.len()],
        method: Method::Eig,
        iterations: 1,
        runtime_seconds: start.elapsed().as_secs_f64(),
        objective_trace: Vec::new(),
        lambda: None,
        edge_weights: None,
    })
}

fn eig_rotations(
    obs: &BlockObservationMatrix,
    weights: Option<&DMatrix<f64>>,
) -> Result<Vec<RotationMatrix>, SyncError> {
    if let Some(w) = weights {
        check_weights(obs, w)?;
    }
    let n = obs.n;
    let degrees = weighted_degrees(obs, weights);
    if let Some(k) = degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(SyncError::ZeroDegreeNode(k));
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();

    let mut sym = obs.data.clone();
    for bj in 0..n {
        for bi in 0..n {
            let a = obs.adjacency[(bi, bj)] * weights.map_or(1.0, |w| w[(bi, bj)]);
            let scale = a * inv_sqrt[bi] * inv_sqrt[bj];
            let mut block = sym.fixed_view_mut::<3, 3>(3 * bi, 3 * bj);
            block *= scale;
        }
    }

    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut stacked = DenseMatrix::zeros(3 * n, 3);
    for (col, &idx) in order.iter().take(3).enumerate() {
        stacked.set_column(col, &eig.eigenvectors.column(idx));
    }
    for bi in 0..n {
        let mut block = stacked.fixed_view_mut::<3, 3>(3 * bi, 0);
        block *= inv_sqrt[bi];
    }
    // eigenvectors have arbitrary signs; make the blocks proper rotations
    let det_sum: f64 = (0..n).map(|k| stacked.fixed_view::<3, 3>(3 * k, 0).determinant()).sum();
    if det_sum < 0.0 {
        let mut last = stacked.column_mut(2);
        last *= -1.0;
    }

    let blocks = (0..n)
        .map(|k| {
            project_to_so3(&stacked.fixed_view::<3, 3>(3 * k, 0).into_owned())
                .map_err(|_| SyncError::ExtractionDegenerate(k))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fix_gauge(blocks))
}

/// Cauchy weight `1 / (1 + (r / c)^2)`.
pub fn cauchy_weight(residual: f64, c: f64) -> f64 {
    1.0 / (1.0 + (residual / c).powi(2))
}

/// Conventional tuning constant of the Cauchy weight function.
pub const CAUCHY_C: f64 = 2.385;

/// Scale applied to the residuals before the Cauchy weight is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResidualScale {
    /// Raw chordal residuals.
    Unit,
    /// Residuals divided by the robust scale `median(r) / 0.6745`, never
    /// below `floor`. The tuning constant then refers to standardized
    /// residuals, as in robust regression.
    Mad { floor: f64 },
}

impl ResidualScale {
    pub fn scale(&self, residuals: &[f64]) -> f64 {
        match *self {
            ResidualScale::Unit => 1.0,
            ResidualScale::Mad { floor } => (median(residuals) / 0.6745).max(floor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_rounds: usize,
    pub c: f64,
    /// Stop when no weight moves by more than this.
    pub weight_tol: f64,
    pub scale: ResidualScale,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_rounds: 20, c: CAUCHY_C, weight_tol: 1e-6, scale: ResidualScale::Mad { floor: 1e-6 } }
    }
}

/// Chordal residual `||R_i R_j^T - R_ij||_F` of every measured edge.
pub fn edge_residuals(obs: &BlockObservationMatrix, rotations: &[RotationMatrix]) -> Vec<f64> {
    obs.edges
        .iter()
        .map(|&(i, j)| {
            let predicted = rotations[i].matrix() * rotations[j].matrix().transpose();
            (predicted - obs.block(i, j)).norm()
        })
        .collect()
}

/// EIG with iteratively reweighted edges (Cauchy weights on the scaled
/// chordal residuals). Degrees are recomputed from the current weights every round.
pub fn solve_eig_irls(obs: &BlockObservationMatrix, opts: &IrlsOptions) -> Result<SyncSolution, SyncError> {
    if opts.max_rounds == 0 || !(opts.c > 0.0) {
        return Err(SyncError::InvalidParameter(format!(
            "max_rounds must be positive and c > 0 (got {}, {})",
            opts.max_rounds, opts.c
        )));
    }
    let start = Instant::now();
    let n = obs.n;
    let mut weights = obs.adjacency.clone();
    let mut edge_weights = vec![1.0; obs.edges.len()];
    let mut trace = Vec::with_capacity(opts.max_rounds);
    let mut rotations = Vec::new();
    let mut rounds = 0;

    while rounds < opts.max_rounds {
        rounds += 1;
        rotations = eig_rotations(obs, Some(&weights))?;
        let residuals = edge_residuals(obs, &rotations);
        trace.push(residuals.iter().zip(&edge_weights).map(|(r, w)| w * r * r).sum());

        let scale = opts.scale.scale(&residuals);
        let mut max_change: f64 = 0.0;
        for (k, (&(i, j), r)) in obs.edges.iter().zip(&residuals).enumerate() {
            let w = cauchy_weight(r / scale, opts.c);
            max_change = max_change.max((w - edge_weights[k]).abs());
            edge_weights[k] = w;
            weights[(i, j)] = w;
            weights[(j, i)] = w;
        }
        debug_assert!((0..n).all(|i| weights[(i, i)] == 1.0));
        if max_change < opts.weight_tol {
            break;
        }
    }

    let edge_labels = edge_weights
        .iter()
        .map(|&w| if w < 0.5 { EdgeLabel::Outlier } else { EdgeLabel::Inlier })
        .collect();
    Ok(SyncSolution {
        rotations,
        edge_labels,
        method: Method::EigIrls,
        iterations: rounds,
        runtime_seconds: start.elapsed().as_secs_f64(),
        objective_trace: trace,
        lambda: None,
        edge_weights: Some(edge_weights),
    })
}

/// Parameter count of the rank-3 matrix `X` and the minimal number of
/// specified entries (a spanning tree plus the identity diagonal), both
/// `9 (2n - 1)`.
pub fn dof_check(n: usize) -> (usize, usize) {
    assert!(n >= 1);
    let rows = 3 * n;
    let rank = 3;
    let params = (rows + rows - rank) * rank;
    let min_entries = 9 * ((n - 1) + n);
    (params, min_entries)
}
