//! Low-rank plus sparse matrix decomposition.
//!
//! Randomized rank-r approximation, shrinkage operators, and the GoDec family
//! of block-coordinate solvers (robust PCA, matrix completion, and the robust
//! completion variant with an outlier term and a completion term).

mod approx;
mod godec;
mod shrink;

use nalgebra::DMatrix;
use thiserror::Error;

pub use approx::{brp_lowrank_approx, truncated_svd_approx, LowRankApprox, DEFAULT_POWER_ITERS};
pub use godec::{
    godec, godec_mc, rgodec, DecompositionResult, GodecOptions, ShrinkMode, SparsityControl,
};
pub use shrink::{block_soft_threshold, hard_threshold_topk, soft_threshold};

/// Dense real matrix. Entries are stored column-major.
pub type DenseMatrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowRankError {
    #[error("rank {rank} is invalid for a {rows}x{cols} matrix")]
    InvalidRank { rank: usize, rows: usize, cols: usize },
    #[error("matrix dimensions {rows}x{cols} are not multiples of 3")]
    BadBlockShape { rows: usize, cols: usize },
    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("data matrix has nonzero entries outside the pattern")]
    DataOutsidePattern,
}

/// 0/1 mask of specified entries (`Omega`); its complement marks the
/// unspecified ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    rows: usize,
    cols: usize,
    // column-major, same layout as `DenseMatrix`
    mask: Vec<bool>,
}

impl SparsityPattern {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, mask: vec![true; rows * cols] }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, mask: vec![false; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                mask.push(f(r, c));
            }
        }
        Self { rows, cols, mask }
    }

    /// Expands an `n x n` block mask into a `3n x 3n` scalar mask (`A (x) 1_3x3`).
    pub fn from_block_mask(n: usize, block: impl Fn(usize, usize) -> bool) -> Self {
        Self::from_fn(3 * n, 3 * n, |r, c| block(r / 3, c / 3))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[col * self.rows + row]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.mask[col * self.rows + row] = value;
    }

    /// Number of specified entries.
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self { rows: self.rows, cols: self.cols, mask: self.mask.iter().map(|b| !b).collect() }
    }

    /// `P_Omega(m)`: zeroes the unspecified entries.
    pub fn project(&self, m: &DenseMatrix) -> DenseMatrix {
        let mut out = m.clone();
        self.project_in_place(&mut out);
        out
    }

    pub fn project_in_place(&self, m: &mut DenseMatrix) {
        for (x, &keep) in m.as_mut_slice().iter_mut().zip(&self.mask) {
            if !keep {
                *x = 0.0;
            }
        }
    }

    /// `P_complement(m)`: zeroes the specified entries.
    pub fn project_complement(&self, m: &DenseMatrix) -> DenseMatrix {
        let mut out = m.clone();
        for (x, &keep) in out.as_mut_slice().iter_mut().zip(&self.mask) {
            if keep {
                *x = 0.0;
            }
        }
        out
    }

    /// True when `m` is zero on every unspecified entry.
    pub fn contains_support_of(&self, m: &DenseMatrix) -> bool {
        m.as_slice().iter().zip(&self.mask).all(|(&x, &keep)| keep || x == 0.0)
    }
}

/// Sum of Frobenius norms of the 3x3 blocks.
pub fn block_l21_norm(m: &DenseMatrix) -> f64 {
    let mut total = 0.0;
    for bc in 0..m.ncols() / 3 {
        for br in 0..m.nrows() / 3 {
            total += m.fixed_view::<3, 3>(3 * br, 3 * bc).norm();
        }
    }
    total
}

pub fn l1_norm(m: &DenseMatrix) -> f64 {
    m.iter().map(|x| x.abs()).sum()
}

/// `sigma * sqrt(2 ln m)`, the universal threshold for uncorrelated residuals.
pub fn auto_lambda(sigma: f64, m: usize) -> f64 {
    assert!(m >= 1, "auto_lambda needs at least one observation");
    sigma * (2.0 * (m as f64).ln()).sqrt()
}
