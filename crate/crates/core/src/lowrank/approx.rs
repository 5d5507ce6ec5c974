use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DenseMatrix, LowRankError};

pub const DEFAULT_POWER_ITERS: usize = 2;

/// Retries with a fresh random draw before giving up on the sketch.
const BRP_RETRIES: usize = 3;
/// Reciprocal condition number of the projection Gram matrix below which the
/// sketch is treated as singular.
const GRAM_RCOND: f64 = 1e-12;

/// Rank-r approximation together with the orthonormal basis spanning its
/// column space.
#[derive(Debug, Clone)]
pub struct LowRankApprox {
    pub matrix: DenseMatrix,
    /// `rows x k` orthonormal columns with `k <= r`.
    pub basis: DenseMatrix,
    /// True when the random sketch stayed singular and the exact truncated
    /// SVD was used instead.
    pub used_fallback: bool,
}

fn check_rank(m: &DenseMatrix, r: usize) -> Result<(), LowRankError> {
    let (rows, cols) = m.shape();
    if r == 0 || r > rows.min(cols) {
        return Err(LowRankError::InvalidRank { rank: r, rows, cols });
    }
    Ok(())
}

/// Rank-r approximation by bilateral random projection.
///
/// With a Gaussian test matrix `A1` (`cols x r`), `Y1 = M A1` and
/// `Y2 = M^T Y1`, the approximation is `Y1 (Y1^T Y1)^-1 Y2^T`, i.e. the
/// projection of `M` onto the range of `Y1`. `power_iters` rounds of
/// `Y1 <- M M^T Y1` sharpen the sketch; each round is re-orthonormalized,
/// which leaves the spanned subspace unchanged.
pub fn brp_lowrank_approx<R: Rng + ?Sized>(
    m: &DenseMatrix,
    r: usize,
    power_iters: usize,
    rng: &mut R,
) -> Result<DenseMatrix, LowRankError> {
    Ok(brp_with_basis(m, r, power_iters, rng)?.matrix)
}

pub(crate) fn brp_with_basis<R: Rng + ?Sized>(
    m: &DenseMatrix,
    r: usize,
    power_iters: usize,
    rng: &mut R,
) -> Result<LowRankApprox, LowRankError> {
    check_rank(m, r)?;
    let (rows, cols) = m.shape();
    if m.iter().all(|&x| x == 0.0) {
        return Ok(LowRankApprox {
            matrix: DenseMatrix::zeros(rows, cols),
            basis: DenseMatrix::zeros(rows, 0),
            used_fallback: false,
        });
    }
    for _ in 0..=BRP_RETRIES {
        let test = DMatrix::from_fn(cols, r, |_, _| StandardNormal.sample(rng));
        let mut sketch = m * test;
        for _ in 0..power_iters {
            let q = sketch.qr().q();
            let back = m.tr_mul(&q);
            sketch = m * back;
        }
        if let Some(basis) = well_conditioned_basis(sketch) {
            let matrix = &basis * basis.tr_mul(m);
            return Ok(LowRankApprox { matrix, basis, used_fallback: false });
        }
    }
    let (matrix, basis) = truncated_svd_parts(m, r);
    Ok(LowRankApprox { matrix, basis, used_fallback: true })
}

// Orthonormal basis of the sketch, or None when its Gram matrix is singular
// beyond `GRAM_RCOND`.
fn well_conditioned_basis(sketch: DenseMatrix) -> Option<DenseMatrix> {
    if sketch.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let qr = sketch.qr();
    let sv = qr.r().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || (min / max).powi(2) < GRAM_RCOND {
        return None;
    }
    Some(qr.q())
}

/// Best rank-r approximation in Frobenius norm (Eckart-Young).
pub fn truncated_svd_approx(m: &DenseMatrix, r: usize) -> Result<DenseMatrix, LowRankError> {
    check_rank(m, r)?;
    Ok(truncated_svd_parts(m, r).0)
}

fn truncated_svd_parts(m: &DenseMatrix, r: usize) -> (DenseMatrix, DenseMatrix) {
    let (rows, cols) = m.shape();
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut basis = DenseMatrix::zeros(rows, r);
    for (k, &idx) in order.iter().take(r).enumerate() {
        let s = svd.singular_values[idx];
        out += u.column(idx) * v_t.row(idx) * s;
        basis.set_column(k, &u.column(idx));
    }
    (out, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::random_rotation_uniform;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stacked_gram(count: usize, seed: u64) -> DenseMatrix {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let mut stack = DenseMatrix::zeros(3 * count, 3);
        for k in 0..count {
            let r = random_rotation_uniform(&mut g);
            stack.fixed_view_mut::<3, 3>(3 * k, 0).copy_from(r.matrix());
        }
        &stack * stack.transpose()
    }

    #[test]
    fn zero_matrix_maps_to_zero() {
        let mut g = ChaCha8Rng::seed_from_u64(0);
        let z = DenseMatrix::zeros(6, 4);
        assert_eq!(brp_lowrank_approx(&z, 2, 2, &mut g).unwrap(), z);
    }

    #[test]
    fn exact_rank_three_recovery() {
        let m = stacked_gram(5, 3);
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let l = brp_lowrank_approx(&m, 3, DEFAULT_POWER_ITERS, &mut g).unwrap();
        let oracle = truncated_svd_approx(&m, 3).unwrap();
        assert!((&l - &m).norm() / m.norm() < 1e-8);
        assert!((&oracle - &m).norm() / m.norm() < 1e-12);
    }

    #[test]
    fn random_matrix_close_to_svd_optimum() {
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let m = DenseMatrix::from_fn(20, 20, |_, _| StandardNormal.sample(&mut g));
        let l = brp_lowrank_approx(&m, 5, 3, &mut g).unwrap();
        let best = truncated_svd_approx(&m, 5).unwrap();
        assert!((&m - &l).norm() <= 1.10 * (&m - &best).norm());
    }

    #[test]
    fn rank_deficient_sketch_falls_back_to_svd() {
        // rank one matrix asked for rank two: the sketch is singular
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let m = &u * u.transpose();
        let mut g = ChaCha8Rng::seed_from_u64(9);
        let approx = brp_with_basis(&m, 2, 1, &mut g).unwrap();
        assert!(approx.used_fallback);
        assert!((&approx.matrix - &m).norm() < 1e-12);
    }

    #[test]
    fn truncated_svd_examples() {
        let d = DenseMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let expected = DenseMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 0.0]));
        assert!((truncated_svd_approx(&d, 2).unwrap() - expected).amax() < 1e-12);

        let mut g = ChaCha8Rng::seed_from_u64(2);
        let m = DenseMatrix::from_fn(5, 4, |_, _| StandardNormal.sample(&mut g));
        assert!((truncated_svd_approx(&m, 4).unwrap() - &m).amax() < 1e-12);

        let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = DVector::from_vec(vec![0.3, 4.0]);
        let outer = &a * b.transpose();
        assert!((truncated_svd_approx(&outer, 1).unwrap() - &outer).amax() < 1e-12);
    }

    #[test]
    fn invalid_rank_is_rejected() {
        let m = DenseMatrix::zeros(3, 2);
        assert!(truncated_svd_approx(&m, 3).is_err());
        let mut g = ChaCha8Rng::seed_from_u64(0);
        assert!(brp_lowrank_approx(&m, 0, 0, &mut g).is_err());
    }

    #[test]
    fn brp_is_deterministic_given_seed() {
        let mut g = ChaCha8Rng::seed_from_u64(4);
        let m = DenseMatrix::from_fn(12, 9, |_, _| StandardNormal.sample(&mut g));
        let a = brp_lowrank_approx(&m, 3, 2, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = brp_lowrank_approx(&m, 3, 2, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
    }
}
