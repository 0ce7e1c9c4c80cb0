use nalgebra::DMatrix;

/// Best rank-`s` approximation in Frobenius norm (truncated SVD).
///
/// Computed as the projection onto the leading singular subspace of the
/// smaller side, taken from the eigen-decomposition of the Gram matrix. The
/// stacked matrices here have few rows and are often exactly rank deficient
/// (identical rows), where a direct SVD can return an inconsistent basis.
pub fn lowrank_project(matrix: &DMatrix<f64>, s: usize) -> DMatrix<f64> {
    let (r, c) = matrix.shape();
    if s >= r.min(c) {
        return matrix.clone();
    }
    if s == 0 {
        return DMatrix::zeros(r, c);
    }
    if r <= c {
        let u = leading_left_subspace(matrix, s);
        &u * (u.transpose() * matrix)
    } else {
        let v = leading_left_subspace(&matrix.transpose(), s);
        (matrix * &v) * v.transpose()
    }
}

/// Orthonormal basis (columns) of the leading `s`-dimensional left singular
/// subspace of `matrix`.
pub(crate) fn leading_left_subspace(matrix: &DMatrix<f64>, s: usize) -> DMatrix<f64> {
    let r = matrix.nrows();
    let s = s.min(r);
    let (values, vectors) = crate::linalg::symmetric_eigen(&(matrix * matrix.transpose()));
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    DMatrix::from_fn(r, s, |i, k| vectors[(i, order[k])])
}
