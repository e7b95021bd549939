//! Small linear-algebra helpers shared by the estimators.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Inverse of a symmetric PSD matrix via eigendecomposition, adding a ridge
/// `ridge_factor * trace / r` to every eigenvalue when the matrix is
/// ill-conditioned (condition number above 1e12) or not positive definite.
///
/// Returns the inverse and whether regularization kicked in.
pub fn robust_spd_inverse(s: &DMatrix<f64>, ridge_factor: f64) -> Result<(DMatrix<f64>, bool)> {
    let r = s.nrows();
    if r != s.ncols() {
        return Err(Error::InvalidData(
            "robust_spd_inverse needs a square matrix".into(),
        ));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min_ev = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let trace = eig.eigenvalues.sum();
    if !(max_ev.is_finite() && max_ev > 0.0) {
        return Err(Error::RankDeficient(
            "matrix has no positive eigenvalue".into(),
        ));
    }
    let ridged = min_ev <= 0.0 || max_ev / min_ev > 1e12;
    let lambda = if ridged {
        (ridge_factor * trace / r as f64).max(1e-300)
    } else {
        0.0
    };
    let mut inv_vals = DVector::zeros(r);
    for i in 0..r {
        inv_vals[i] = 1.0 / (eig.eigenvalues[i] + lambda);
    }
    let v = &eig.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    Ok((inv, ridged))
}

/// Solve `a x = b` for symmetric positive definite `a`, with a rank check.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => Err(Error::RankDeficient(format!(
            "{what} is not positive definite"
        ))),
    }
}

/// Solve the (possibly damped) normal equations `(a + lambda I) x = b`.
pub fn damped_solve(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = a.nrows();
    let mut m = a.clone();
    for i in 0..n {
        m[(i, i)] += lambda;
    }
    m.cholesky().map(|ch| ch.solve(b))
}
