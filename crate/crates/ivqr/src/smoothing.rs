//! Smoothed indicator function, bandwidth selection, and kernel Jacobian
//! estimation for the smoothed quantile moment conditions.
//!
//! The smoothed indicator is the integrated biweight kernel: a C1 CDF with
//! support [-1, 1]. Its derivative k(u) = (15/16)(1 - u^2)^2 doubles as the
//! kernel in the Jacobian estimator.

use crate::data::{Dataset, MomentKind, MomentSet, QuantileLevel};
use crate::error::{Error, Result};
use crate::metrics::empirical_quantile;
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Smoothed indicator value for the scaled argument `v`, without the
/// finiteness check; internal hot path.
#[inline]
pub(crate) fn itilde(v: f64) -> f64 {
    if v <= -1.0 {
        0.0
    } else if v >= 1.0 {
        1.0
    } else {
        0.5 + (15.0 / 16.0) * (v - 2.0 * v.powi(3) / 3.0 + v.powi(5) / 5.0)
    }
}

/// Derivative of the smoothed indicator: the biweight kernel on [-1, 1].
#[inline]
pub(crate) fn itilde_deriv(v: f64) -> f64 {
    if v.abs() >= 1.0 {
        0.0
    } else {
        let w = 1.0 - v * v;
        (15.0 / 16.0) * w * w
    }
}

/// Smooth CDF-like replacement for `1{v >= 0}`: zero below -1, one above 1,
/// strictly increasing in between, and symmetric (`I(v) + I(-v) = 1`).
pub fn smoothed_indicator(v: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::InvalidData(format!(
            "smoothed indicator needs a finite argument, got {v}"
        )));
    }
    Ok(itilde(v))
}

/// How a Jacobian bandwidth was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandwidthMethod {
    PluginGaussianQr,
    PluginGaussianIvqr,
    NonparametricIvqr,
    Default,
}

/// A selected bandwidth plus the plug-in intermediates when applicable.
#[derive(Debug, Clone, Copy)]
pub struct BandwidthReport {
    pub h: f64,
    pub alpha_tau: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub method: BandwidthMethod,
}

pub const DEFAULT_BANDWIDTH_FLOOR: f64 = 1e-4;

/// Estimation (smoothing) bandwidth: `max(floor, c * scale * n^{-1/2})`
/// with configurable constant and floor.
pub fn smoothing_bandwidth_with(n: usize, residual_scale: f64, c: f64, floor: f64) -> Result<f64> {
    if !(residual_scale.is_finite() && residual_scale > 0.0) {
        return Err(Error::InvalidData(format!(
            "residual scale must be positive, got {residual_scale}"
        )));
    }
    Ok((c * residual_scale / (n as f64).sqrt()).max(floor))
}

/// Default estimation bandwidth, shrinking at the root-n rate so smoothing
/// bias stays negligible relative to sampling error.
pub fn default_smoothing_bandwidth(
    data: &Dataset,
    _tau: QuantileLevel,
    residual_scale: f64,
) -> Result<f64> {
    smoothing_bandwidth_with(data.n(), residual_scale, 1.0, DEFAULT_BANDWIDTH_FLOOR)
}

/// Robust spread of a residual vector: IQR / 1.349, falling back to the
/// standard deviation and then to a small positive floor when degenerate.
pub fn robust_residual_scale(residuals: &DVector<f64>) -> f64 {
    let v: Vec<f64> = residuals.iter().cloned().collect();
    if let (Ok(q75), Ok(q25)) = (empirical_quantile(&v, 0.75), empirical_quantile(&v, 0.25)) {
        let iqr_scale = (q75 - q25) / 1.349;
        if iqr_scale > 0.0 {
            return iqr_scale;
        }
    }
    let n = residuals.len().max(1) as f64;
    let mean = residuals.sum() / n;
    let sd = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        sd
    } else {
        let max_abs = residuals.iter().fold(0.0_f64, |a, r| a.max(r.abs()));
        1e-8 * (1.0 + max_abs)
    }
}

/// Which variant of the Gaussian plug-in bandwidth to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PluginVariant {
    /// Conventional quantile regression: instruments are the regressors.
    Qr,
    /// Instrumental-variables version: cross moments of regressors and
    /// instruments replace the regressor-only moments.
    Ivqr,
}

/// Gaussian plug-in bandwidth for Jacobian estimation,
///
/// ```text
/// h = n^{-1/5} ( 4.5 * sum_{j,k} mean_i(X_ij^2 Z_ik^2)
///              / (alpha(tau) * sum_{j,k} mean_i(X_ij Z_ik)^2) )^{1/5}
/// alpha(tau) = sigma^{-5} [1 - PhiInv(tau)^2]^2 phi(PhiInv(tau))
/// ```
///
/// For the QR variant the caller passes the regressors as instruments.
/// A quantile level with `PhiInv(tau)^2 = 1` makes `alpha` vanish; that and
/// degenerate regressors are reported as distinct bandwidth errors.
pub fn kato_plugin_bandwidth(
    regressors: &DMatrix<f64>,
    instruments: &DMatrix<f64>,
    tau: QuantileLevel,
    sigma_hat: f64,
    variant: PluginVariant,
) -> Result<BandwidthReport> {
    if !(sigma_hat.is_finite() && sigma_hat > 0.0) {
        return Err(Error::InvalidData(format!(
            "sigma_hat must be positive, got {sigma_hat}"
        )));
    }
    let n = regressors.nrows();
    if n == 0 || instruments.nrows() != n {
        return Err(Error::InvalidData(
            "regressors/instruments row mismatch".into(),
        ));
    }
    if variant == PluginVariant::Qr && regressors.ncols() != instruments.ncols() {
        return Err(Error::InvalidData(
            "QR variant expects instruments identical to regressors".into(),
        ));
    }

    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let q = std_normal.inverse_cdf(tau.get());
    let alpha = (1.0 - q * q).powi(2) * std_normal.pdf(q) / sigma_hat.powi(5);
    if alpha.abs() < 1e-14 {
        return Err(Error::DegenerateBandwidth(format!(
            "alpha(tau) vanishes at tau = {} (PhiInv(tau)^2 = 1)",
            tau.get()
        )));
    }

    let nf = n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..regressors.ncols() {
        for k in 0..instruments.ncols() {
            let mut sq = 0.0;
            let mut cross = 0.0;
            for i in 0..n {
                let xj = regressors[(i, j)];
                let zk = instruments[(i, k)];
                sq += xj * xj * zk * zk;
                cross += xj * zk;
            }
            num += sq / nf;
            den += (cross / nf).powi(2);
        }
    }
    if den <= 0.0 {
        return Err(Error::DegenerateBandwidth(
            "cross-moment denominator is zero (degenerate regressors)".into(),
        ));
    }

    let h = nf.powf(-0.2) * (4.5 * num / (alpha * den)).powf(0.2);
    let method = match variant {
        PluginVariant::Qr => BandwidthMethod::PluginGaussianQr,
        PluginVariant::Ivqr => BandwidthMethod::PluginGaussianIvqr,
    };
    Ok(BandwidthReport {
        h,
        alpha_tau: Some(alpha),
        sigma_hat: Some(sigma_hat),
        method,
    })
}

// Gaussian-reference KDE at a point: density and second derivative, with
// reference-rule bandwidths sigma (4/(3m))^{1/5} and sigma (4/(7m))^{1/9}.
fn cell_density_estimates(residuals: &[f64]) -> Option<(f64, f64)> {
    let m = residuals.len();
    if m < 5 {
        return None;
    }
    let mf = m as f64;
    let mean = residuals.iter().sum::<f64>() / mf;
    let sd = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / mf).sqrt();
    let mut sorted = residuals.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q25 = empirical_quantile(&sorted, 0.25).ok()?;
    let q75 = empirical_quantile(&sorted, 0.75).ok()?;
    let robust = ((q75 - q25) / 1.349).min(sd);
    let scale = if robust > 0.0 {
        robust
    } else if sd > 0.0 {
        sd
    } else {
        return None;
    };

    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let b0 = scale * (4.0 / (3.0 * mf)).powf(0.2);
    let b2 = scale * (4.0 / (7.0 * mf)).powf(1.0 / 9.0);
    let mut f0 = 0.0;
    let mut f2 = 0.0;
    for &r in residuals {
        let u0 = -r / b0;
        f0 += inv_sqrt_2pi * (-0.5 * u0 * u0).exp();
        let u2 = -r / b2;
        f2 += (u2 * u2 - 1.0) * inv_sqrt_2pi * (-0.5 * u2 * u2).exp();
    }
    Some((f0 / (mf * b0), f2 / (mf * b2.powi(3))))
}

/// Nonparametric IVQR Jacobian bandwidth for designs where the endogenous
/// regressors and excluded instruments are discrete (the one-binary-treatment
/// layout): the conditional density of the residual given `(X, Z)` is
/// estimated per cell by a univariate Gaussian-reference KDE, then plugged
/// into the general cross-moment bandwidth formula.
pub fn nonparametric_ivqr_bandwidth(
    data: &Dataset,
    residuals: &DVector<f64>,
) -> Result<BandwidthReport> {
    let n = data.n();
    if residuals.len() != n {
        return Err(Error::InvalidData("residual length mismatch".into()));
    }

    // Cell key: the discrete (endogenous, excluded-instrument) pattern.
    let key = |i: usize| -> Vec<u64> {
        let mut k = Vec::with_capacity(data.d_endog() + data.z_excl().ncols());
        for j in 0..data.d_endog() {
            k.push(data.endog()[(i, j)].to_bits());
        }
        for j in 0..data.z_excl().ncols() {
            k.push(data.z_excl()[(i, j)].to_bits());
        }
        k
    };

    let mut cells: std::collections::BTreeMap<Vec<u64>, Vec<usize>> = Default::default();
    for i in 0..n {
        cells.entry(key(i)).or_default().push(i);
    }
    if cells.len() > 16 {
        return Err(Error::DegenerateInput(format!(
            "nonparametric bandwidth expects a small discrete design, found {} cells",
            cells.len()
        )));
    }

    let mut f0 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    for idx in cells.values() {
        let rs: Vec<f64> = idx.iter().map(|&i| residuals[i]).collect();
        let (d0, d2) = cell_density_estimates(&rs).ok_or_else(|| {
            Error::DegenerateInput(format!(
                "cell with {} observations is too small or degenerate for density estimation",
                rs.len()
            ))
        })?;
        for &i in idx {
            f0[i] = d0;
            f2[i] = d2;
        }
    }

    let x = data.x();
    let z = data.z();
    let nf = n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..data.d_x() {
        for k in 0..data.d_z() {
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..n {
                let xj = x[(i, j)];
                let zk = z[(i, k)];
                a += f0[i] * xj * xj * zk * zk;
                b += f2[i] * xj * zk;
            }
            num += a / nf;
            den += (b / nf).powi(2);
        }
    }
    if den <= 0.0 || !num.is_finite() || !den.is_finite() {
        return Err(Error::DegenerateBandwidth(
            "nonparametric bandwidth denominator is zero or non-finite".into(),
        ));
    }
    let h = nf.powf(-0.2) * (4.5 * num / den).powf(0.2);
    Ok(BandwidthReport {
        h,
        alpha_tau: None,
        sigma_hat: None,
        method: BandwidthMethod::NonparametricIvqr,
    })
}

/// Sample Jacobian of the moment stack at `beta`, `r x d_X`.
///
/// Indicator-type rows use the kernel weight `k((x'b - y)/h)/h` times the
/// instrument for that row; the 2SLS slope rows are linear in `beta` and
/// come out exactly, independent of the bandwidth.
pub fn estimate_jacobian(
    data: &Dataset,
    beta: &DVector<f64>,
    _tau: QuantileLevel,
    h: f64,
    set: &MomentSet,
) -> Result<DMatrix<f64>> {
    if beta.len() != data.d_x() {
        return Err(Error::InvalidData(format!(
            "beta has length {}, expected {}",
            beta.len(),
            data.d_x()
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidData(format!(
            "jacobian bandwidth must be positive, got {h}"
        )));
    }
    let n = data.n();
    let nf = n as f64;
    let x = data.x();
    let z = data.z();
    let r = set.dim(data);
    let mut g = DMatrix::zeros(r, data.d_x());

    // Kernel weights at the scaled residuals.
    let fitted = x * beta;
    let mut kw = DVector::zeros(n);
    for i in 0..n {
        kw[i] = itilde_deriv((fitted[i] - data.y()[i]) / h) / h;
    }

    let mut add_indicator_block = |rows_at: usize, w: &DMatrix<f64>| {
        for c in 0..w.ncols() {
            for j in 0..data.d_x() {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += w[(i, c)] * kw[i] * x[(i, j)];
                }
                g[(rows_at + c, j)] = acc / nf;
            }
        }
    };

    add_indicator_block(0, z);
    match set.kind {
        MomentKind::Conservative => {}
        MomentKind::AggressiveQr => add_indicator_block(data.d_z(), data.endog()),
        MomentKind::Aggressive2sls => {
            let cols = data.noninstrument_intercept_cols();
            for (row, &c) in cols.iter().enumerate() {
                let zbar = z.column(c).sum() / nf;
                for j in 0..data.d_x() {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += (z[(i, c)] - zbar) * x[(i, j)];
                    }
                    g[(data.d_z() + row, j)] = -acc / nf;
                }
            }
        }
    }
    Ok(g)
}
