//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::{Error, Result};

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank with threshold `rel_tol · σ_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    let Some(&top) = sv.first() else { return 0 };
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Orthonormal basis (as columns) of the null space of `m`, using an absolute
/// singular-value threshold `tol`.
pub fn null_space(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let cols = m.ncols();
    // pad to a square (or tall) matrix so the SVD returns the full right basis
    let rows = m.nrows().max(cols);
    let mut padded = DMatrix::zeros(rows, cols);
    padded.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let basis: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= tol)
        .map(|(i, _)| v_t.row(i).transpose())
        .collect();
    if basis.is_empty() {
        DMatrix::zeros(cols, 0)
    } else {
        DMatrix::from_columns(&basis)
    }
}

/// Orthonormal basis of `ker(row)` for a non-zero row vector.
pub fn row_kernel(row: &RowDVector<f64>) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(1, row.len(), row.as_slice());
    null_space(&m, 1e-12 * row.norm().max(1.0))
}

pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::RankDeficient(format!("{what} is singular")))
}

/// Moore–Penrose pseudo-inverse.
pub fn pinv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eps = 1e-13 * spectral_norm(m).max(f64::MIN_POSITIVE);
    m.clone()
        .pseudo_inverse(eps)
        .map_err(|e| Error::RankDeficient(e.to_string()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn outer(a: &DVector<f64>, b: &RowDVector<f64>) -> DMatrix<f64> {
    a * b
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
