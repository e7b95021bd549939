//! Conventional quantile regression and two-stage least squares, used as
//! averaging components and as solver anchors.

use crate::data::{Dataset, QuantileLevel};
use crate::error::{Error, Result};
use crate::linalg::spd_solve;
use crate::smoothing::{itilde, itilde_deriv, robust_residual_scale};
use nalgebra::{DMatrix, DVector};

/// A linear fit: coefficients and the implied residuals `y - X b`.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
    pub converged: bool,
}

fn check_objective(y: &DVector<f64>, x: &DMatrix<f64>, beta: &DVector<f64>, tau: f64) -> f64 {
    let fitted = x * beta;
    let mut obj = 0.0;
    for i in 0..y.len() {
        let u = y[i] - fitted[i];
        obj += u * (tau - f64::from(u <= 0.0));
    }
    obj
}

/// Weighted least squares with a small ridge, `(X'WX + lam I) b = X'Wy`.
fn wls(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, lam: f64) -> Option<DVector<f64>> {
    let d = x.ncols();
    let mut xtwx = DMatrix::zeros(d, d);
    let mut xtwy = DVector::zeros(d);
    for i in 0..x.nrows() {
        let wi = w[i];
        for j in 0..d {
            let xij = wi * x[(i, j)];
            xtwy[j] += xij * y[i];
            for k in j..d {
                xtwx[(j, k)] += xij * x[(i, k)];
            }
        }
    }
    for j in 0..d {
        for k in 0..j {
            xtwx[(j, k)] = xtwx[(k, j)];
        }
        xtwx[(j, j)] += lam;
    }
    xtwx.cholesky().map(|ch| ch.solve(&xtwy))
}

// Damped Newton on the smoothed first-order conditions
// (1/n) sum_i x_i (Itilde((x_i'b - y_i)/h) - tau) = 0; used when IRLS cycles.
fn smoothed_qr_polish(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    h: f64,
    start: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n = x.nrows();
    let nf = n as f64;
    let d = x.ncols();
    let eqs = |b: &DVector<f64>| -> DVector<f64> {
        let fitted = x * b;
        let mut m = DVector::zeros(d);
        for i in 0..n {
            let dev = itilde((fitted[i] - y[i]) / h) - tau;
            for j in 0..d {
                m[j] += x[(i, j)] * dev;
            }
        }
        m / nf
    };
    let jac = |b: &DVector<f64>| -> DMatrix<f64> {
        let fitted = x * b;
        let mut jm = DMatrix::zeros(d, d);
        for i in 0..n {
            let k = itilde_deriv((fitted[i] - y[i]) / h) / h;
            if k == 0.0 {
                continue;
            }
            for j in 0..d {
                let xj = k * x[(i, j)];
                for l in 0..d {
                    jm[(j, l)] += xj * x[(i, l)];
                }
            }
        }
        jm / nf
    };

    let mut beta = start.clone();
    let mut m = eqs(&beta);
    for _ in 0..100 {
        let mut j = jac(&beta);
        let ridge = 1e-10 * (1.0 + j.diagonal().amax());
        for t in 0..d {
            j[(t, t)] += ridge;
        }
        let step = j.lu().solve(&m)?;
        // backtrack on the equation norm
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta - &step * lam;
            let mc = eqs(&cand);
            if mc.norm() < m.norm() {
                beta = cand;
                m = mc;
                accepted = true;
                break;
            }
            lam *= 0.5;
        }
        if !accepted || m.norm() < 1e-12 {
            break;
        }
    }
    Some(beta)
}

/// Quantile regression by iteratively reweighted least squares, with a
/// smoothed-equation Newton fallback when IRLS cycles. Any minimizer of the
/// check loss is acceptable; flat sections are not resolved further.
pub fn qr_fit(data: &Dataset, tau: QuantileLevel) -> Result<LinearFit> {
    let x = data.x();
    let y = data.y();
    let n = data.n();
    let t = tau.get();

    // start from least squares
    let w0 = DVector::from_element(n, 1.0);
    let scale_y = robust_residual_scale(y);
    let ridge = 1e-8 * (1.0 + scale_y * scale_y);
    let mut beta = wls(x, y, &w0, ridge)
        .ok_or_else(|| Error::RankDeficient("X'X singular in quantile regression".into()))?;

    let mut best = beta.clone();
    let mut best_obj = check_objective(y, x, &beta, t);
    let eps = 1e-6 * (1.0 + scale_y);
    let mut converged = false;
    let mut last_obj = best_obj;

    for _ in 0..200 {
        let fitted = x * &beta;
        let mut w = DVector::zeros(n);
        for i in 0..n {
            let r: f64 = y[i] - fitted[i];
            let grad_weight = if r <= 0.0 { 1.0 - t } else { t };
            w[i] = grad_weight / r.abs().max(eps);
        }
        let next = match wls(x, y, &w, ridge) {
            Some(b) => b,
            None => break,
        };
        let obj = check_objective(y, x, &next, t);
        let step = (&next - &beta).norm();
        beta = next;
        if obj < best_obj {
            best_obj = obj;
            best = beta.clone();
        }
        if step <= 1e-10 * (1.0 + beta.norm()) || (last_obj - obj).abs() <= 1e-12 * (1.0 + obj) {
            converged = true;
            break;
        }
        last_obj = obj;
    }

    if !converged {
        let h = 1e-3 * scale_y.max(1e-8);
        if let Some(polished) = smoothed_qr_polish(x, y, t, h, &best) {
            let obj = check_objective(y, x, &polished, t);
            if obj <= best_obj {
                best_obj = obj;
                best = polished;
                converged = true;
            }
        }
    }

    let residuals = y - x * &best;
    let _ = best_obj;
    Ok(LinearFit {
        beta: best,
        residuals,
        converged,
    })
}

/// Two-stage least squares: `b = (Xhat'Xhat)^{-1} Xhat'y` with
/// `Xhat = Z (Z'Z)^{-1} Z'X`; reduces to `(Z'X)^{-1} Z'y` when exactly
/// identified and to OLS when `Z = X`.
pub fn tsls_fit(data: &Dataset) -> Result<LinearFit> {
    let x = data.x();
    let z = data.z();
    let y = data.y();
    let ztz = z.transpose() * z;
    let ztx = z.transpose() * x;
    let first = spd_solve(&ztz, &ztx, "Z'Z")?;
    let xhat = z * first;
    let xhtxh = xhat.transpose() * &xhat;
    let xhty = xhat.transpose() * y;
    let beta = spd_solve(
        &xhtxh,
        &DMatrix::from_column_slice(xhty.len(), 1, xhty.as_slice()),
        "Xhat'Xhat",
    )?
    .column(0)
    .into_owned();
    let residuals = y - x * &beta;
    Ok(LinearFit {
        beta,
        residuals,
        converged: true,
    })
}

/// Projection of the regressors onto the instrument span, `Z (Z'Z)^{-1} Z'X`.
pub fn project_regressors(data: &Dataset) -> Result<DMatrix<f64>> {
    let z = data.z();
    let ztz = z.transpose() * z;
    let ztx = z.transpose() * data.x();
    Ok(z * spd_solve(&ztz, &ztx, "Z'Z")?)
}
