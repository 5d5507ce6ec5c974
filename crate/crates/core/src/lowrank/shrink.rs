use super::{DenseMatrix, LowRankError};

/// Entry-wise `sign(x) * max(0, |x| - lambda)`.
pub fn soft_threshold(m: &DenseMatrix, lambda: f64) -> DenseMatrix {
    m.map(|x| shrink_scalar(x, lambda))
}

pub(crate) fn shrink_scalar(x: f64, lambda: f64) -> f64 {
    let mag = x.abs() - lambda;
    if mag > 0.0 {
        x.signum() * mag
    } else {
        0.0
    }
}

/// Keeps the `k` entries of largest magnitude and zeroes the rest.
///
/// Ties are broken in (row, col) lexicographic order, smaller index first.
pub fn hard_threshold_topk(m: &DenseMatrix, k: usize) -> DenseMatrix {
    let (rows, cols) = m.shape();
    let mut out = DenseMatrix::zeros(rows, cols);
    if k == 0 {
        return out;
    }
    let mut order: Vec<(usize, usize)> =
        (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    let key = |&(r, c): &(usize, usize)| m[(r, c)].abs();
    if k < order.len() {
        // partial selection, then a stable order within the kept set is irrelevant
        order.select_nth_unstable_by(k - 1, |a, b| key(b).total_cmp(&key(a)).then(a.cmp(b)));
        order.truncate(k);
    }
    for (r, c) in order {
        out[(r, c)] = m[(r, c)];
    }
    out
}

/// Block shrinkage on 3x3 blocks: `B * max(1 - lambda / ||B||_F, 0)`.
pub fn block_soft_threshold(m: &DenseMatrix, lambda: f64) -> Result<DenseMatrix, LowRankError> {
    let (rows, cols) = m.shape();
    if rows % 3 != 0 || cols % 3 != 0 {
        return Err(LowRankError::BadBlockShape { rows, cols });
    }
    let mut out = m.clone();
    block_shrink_in_place(&mut out, lambda);
    Ok(out)
}

pub(crate) fn block_shrink_in_place(m: &mut DenseMatrix, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for bc in 0..m.ncols() / 3 {
        for br in 0..m.nrows() / 3 {
            let mut block = m.fixed_view_mut::<3, 3>(3 * br, 3 * bc);
            let norm = block.norm();
            let factor = if norm > 0.0 { (1.0 - lambda / norm).max(0.0) } else { 0.0 };
            block *= factor;
        }
    }
}
