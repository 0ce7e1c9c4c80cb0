//! Small dense linear-algebra helpers shared by the low-rank steps.

use nalgebra::{DMatrix, DVector};

/// Eigen-decomposition of a symmetric matrix, `m = V diag(values) V^T`.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    (eig.eigenvalues, eig.eigenvectors)
}

/// Rebuilds `V diag(values) V^T`.
pub fn recompose_symmetric(values: &DVector<f64>, vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (mut col, v) in scaled.column_iter_mut().zip(values.iter()) {
        col *= *v;
    }
    let mut out = scaled * vectors.transpose();
    symmetrize(&mut out);
    out
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Nuclear norm of a symmetric matrix (sum of absolute eigenvalues).
pub fn symmetric_nuclear_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().iter().map(|v| v.abs()).sum()
}

/// Singular value soft-thresholding of a symmetric matrix.
pub fn symmetric_svt(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let (values, vectors) = symmetric_eigen(m);
    let shrunk = values.map(|v| v.signum() * (v.abs() - tau).max(0.0));
    recompose_symmetric(&shrunk, &vectors)
}

/// Singular values of a general matrix, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    match sv.first() {
        Some(&top) if top > 0.0 => sv.iter().filter(|&&s| s > rel_tol * top).count(),
        _ => 0,
    }
}
