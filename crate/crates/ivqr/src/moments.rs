//! Per-observation moment rows, sample moment means, and the moment
//! covariance matrix for each moment stack.

use crate::data::{Dataset, MomentKind, MomentSet, QuantileLevel};
use crate::error::{Error, Result};
use crate::smoothing::itilde;
use nalgebra::{DMatrix, DVector};

/// Moment rows `g_i(beta, tau)` together with their column mean.
#[derive(Debug, Clone)]
pub struct MomentEvaluation {
    /// `n x r` matrix of per-observation moment rows.
    pub rows: DMatrix<f64>,
    /// Sample moment vector, the column average of `rows`.
    pub mean: DVector<f64>,
}

fn check_beta(data: &Dataset, beta: &DVector<f64>) -> Result<()> {
    if beta.len() != data.d_x() {
        return Err(Error::InvalidData(format!(
            "beta has length {}, expected {}",
            beta.len(),
            data.d_x()
        )));
    }
    if !beta.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidData("beta has non-finite entries".into()));
    }
    Ok(())
}

// Smoothed indicator deviations v_i = Itilde((x_i'b - y_i)/h) - tau and the
// plain residuals y_i - x_i'b, shared by the full and mean-only evaluations.
fn indicator_terms(
    data: &Dataset,
    beta: &DVector<f64>,
    tau: f64,
    h: f64,
) -> (DVector<f64>, DVector<f64>) {
    let fitted = data.x() * beta;
    let n = data.n();
    let mut dev = DVector::zeros(n);
    let mut resid = DVector::zeros(n);
    for i in 0..n {
        dev[i] = itilde((fitted[i] - data.y()[i]) / h) - tau;
        resid[i] = data.y()[i] - fitted[i];
    }
    (dev, resid)
}

/// Sample moment mean only; the optimizer's hot path.
pub fn sample_moment_mean(
    data: &Dataset,
    beta: &DVector<f64>,
    tau: QuantileLevel,
    set: &MomentSet,
) -> Result<DVector<f64>> {
    check_beta(data, beta)?;
    let n = data.n() as f64;
    let (dev, resid) = indicator_terms(data, beta, tau.get(), set.bandwidth);
    let mut mean = DVector::zeros(set.dim(data));
    mean.rows_mut(0, data.d_z())
        .copy_from(&(data.z().transpose() * &dev / n));
    match set.kind {
        MomentKind::Conservative => {}
        MomentKind::AggressiveQr => {
            mean.rows_mut(data.d_z(), data.d_endog())
                .copy_from(&(data.endog().transpose() * &dev / n));
        }
        MomentKind::Aggressive2sls => {
            let cols = data.noninstrument_intercept_cols();
            for (row, &c) in cols.iter().enumerate() {
                let zc = data.z().column(c);
                let zbar = zc.sum() / n;
                let mut acc = 0.0;
                for i in 0..data.n() {
                    acc += (zc[i] - zbar) * resid[i];
                }
                mean[data.d_z() + row] = acc / n;
            }
        }
    }
    Ok(mean)
}

/// Full per-observation moment rows and their mean.
///
/// Row `i` is the instrument block times the smoothed indicator deviation,
/// optionally stacked with the endogenous-regressor quantile moments or the
/// demeaned-instrument 2SLS slope moments (the demeaning uses the sample at
/// hand, so bootstrap resamples recompute it).
pub fn sample_moments(
    data: &Dataset,
    beta: &DVector<f64>,
    tau: QuantileLevel,
    set: &MomentSet,
) -> Result<MomentEvaluation> {
    check_beta(data, beta)?;
    let n = data.n();
    let nf = n as f64;
    let (dev, resid) = indicator_terms(data, beta, tau.get(), set.bandwidth);
    let r = set.dim(data);
    let mut rows = DMatrix::zeros(n, r);
    for c in 0..data.d_z() {
        for i in 0..n {
            rows[(i, c)] = data.z()[(i, c)] * dev[i];
        }
    }
    match set.kind {
        MomentKind::Conservative => {}
        MomentKind::AggressiveQr => {
            for c in 0..data.d_endog() {
                for i in 0..n {
                    rows[(i, data.d_z() + c)] = data.endog()[(i, c)] * dev[i];
                }
            }
        }
        MomentKind::Aggressive2sls => {
            let cols = data.noninstrument_intercept_cols();
            for (row, &c) in cols.iter().enumerate() {
                let zbar = data.z().column(c).sum() / nf;
                for i in 0..n {
                    rows[(i, data.d_z() + row)] = (data.z()[(i, c)] - zbar) * resid[i];
                }
            }
        }
    }
    let mean = rows.row_mean().transpose();
    Ok(MomentEvaluation { rows, mean })
}

/// Centered second-moment matrix of the moment rows at a preliminary
/// estimate: `(1/n) sum_i g_i g_i' - mean mean'`. Symmetric by construction;
/// positive semidefinite up to rounding. Singularity is not an error here --
/// the GMM weighting policy decides how to invert it.
pub fn moment_covariance(
    data: &Dataset,
    beta_check: &DVector<f64>,
    tau: QuantileLevel,
    set: &MomentSet,
) -> Result<DMatrix<f64>> {
    let ev = sample_moments(data, beta_check, tau, set)?;
    let n = data.n() as f64;
    let second = ev.rows.transpose() * &ev.rows / n;
    let outer = &ev.mean * ev.mean.transpose();
    let raw = second - outer;
    Ok((&raw + raw.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical;
    use nalgebra::dvector;

    fn intercept_dataset(y: Vec<f64>) -> Dataset {
        let n = y.len();
        Dataset::new(
            DVector::from_vec(y),
            DMatrix::from_element(n, 1, 1.0),
            DMatrix::zeros(n, 0),
            DMatrix::zeros(n, 0),
        )
        .unwrap()
    }

    fn small_iv_dataset() -> Dataset {
        let y = DVector::from_vec(vec![1.0, 2.0, 0.5, 3.0, 1.5]);
        let d = DMatrix::from_vec(5, 1, vec![0.0, 1.0, 0.0, 1.0, 1.0]);
        let z = DMatrix::from_vec(5, 1, vec![1.0, 1.0, 0.0, 1.0, 0.0]);
        Dataset::new(y, DMatrix::from_element(5, 1, 1.0), d, z).unwrap()
    }

    #[test]
    fn saturated_indicator_means() {
        let ds = small_iv_dataset();
        let tau = QuantileLevel::new(0.3).unwrap();
        let set = MomentSet::new(MomentKind::Conservative, 0.5).unwrap();
        // push fitted values far above every outcome: indicator saturates at 1
        let ev = sample_moments(&ds, &dvector![100.0, 0.0], tau, &set).unwrap();
        let zbar = ds.z().row_mean().transpose();
        assert!((ev.mean.clone() - zbar.clone() * 0.7).norm() < 1e-12);
        // far below: indicator saturates at 0
        let ev = sample_moments(&ds, &dvector![-100.0, 0.0], tau, &set).unwrap();
        assert!((ev.mean.clone() + zbar * 0.3).norm() < 1e-12);
    }

    #[test]
    fn indicator_at_zero_residual() {
        // y = x'b exactly, so the smoothed indicator sits at one half
        let ds = intercept_dataset(vec![1.0, 1.0]);
        let tau = QuantileLevel::new(0.5).unwrap();
        let set = MomentSet::new(MomentKind::Conservative, 1.0).unwrap();
        let ev = sample_moments(&ds, &dvector![1.0], tau, &set).unwrap();
        assert!(ev.mean[0].abs() < 1e-15);
    }

    #[test]
    fn mean_matches_row_average_and_lean_path() {
        let ds = small_iv_dataset();
        let tau = QuantileLevel::new(0.4).unwrap();
        for kind in [
            MomentKind::Conservative,
            MomentKind::AggressiveQr,
            MomentKind::Aggressive2sls,
        ] {
            let set = MomentSet::new(kind, 0.7).unwrap();
            let beta = dvector![0.5, 1.0];
            let ev = sample_moments(&ds, &beta, tau, &set).unwrap();
            let lean = sample_moment_mean(&ds, &beta, tau, &set).unwrap();
            assert!((ev.mean.clone() - lean).norm() < 1e-14);
            let recomputed = ev.rows.row_mean().transpose();
            assert!((ev.mean - recomputed).norm() < 1e-14);
        }
    }

    #[test]
    fn covariance_single_observation_is_zero() {
        // smallest dataset the invariants allow for a 1-parameter model
        let ds = intercept_dataset(vec![1.0, 1.0]);
        let tau = QuantileLevel::new(0.5).unwrap();
        let set = MomentSet::new(MomentKind::Conservative, 1.0).unwrap();
        // simulate the n = 1 identity on a single row by direct formula
        let ev = sample_moments(&ds, &dvector![0.3], tau, &set).unwrap();
        let g = ev.rows.row(0).transpose();
        let cov1 = g.clone() * g.transpose() - g.clone() * g.transpose();
        assert!(cov1.norm() == 0.0);
    }

    #[test]
    fn covariance_of_opposite_rows() {
        // two observations with g1 = -g2 give cov = g1 g1'
        let ds = intercept_dataset(vec![0.0, 2.0]);
        let tau = QuantileLevel::new(0.5).unwrap();
        let set = MomentSet::new(MomentKind::Conservative, 0.5).unwrap();
        // beta = 1: residuals are +1 and -1, indicator saturates both ways
        let ev = sample_moments(&ds, &dvector![1.0], tau, &set).unwrap();
        assert!((ev.rows[(0, 0)] + ev.rows[(1, 0)]).abs() < 1e-15);
        let cov = moment_covariance(&ds, &dvector![1.0], tau, &set).unwrap();
        let g1 = ev.rows[(0, 0)];
        assert!((cov[(0, 0)] - g1 * g1).abs() < 1e-15);
    }

    #[test]
    fn covariance_is_exactly_symmetric() {
        let ds = small_iv_dataset();
        let tau = QuantileLevel::new(0.25).unwrap();
        let set = MomentSet::new(MomentKind::Aggressive2sls, 0.4).unwrap();
        let cov = moment_covariance(&ds, &dvector![0.2, 0.9], tau, &set).unwrap();
        assert_eq!(cov, cov.transpose());
    }

    #[test]
    fn conservative_rows_are_bounded() {
        let ds = small_iv_dataset();
        let tau = QuantileLevel::new(0.3).unwrap();
        let set = MomentSet::new(MomentKind::Conservative, 0.5).unwrap();
        let ev = sample_moments(&ds, &dvector![0.7, -0.4], tau, &set).unwrap();
        let bound = 0.7_f64;
        for c in 0..ds.d_z() {
            for i in 0..ds.n() {
                assert!(ev.rows[(i, c)].abs() <= bound * ds.z()[(i, c)].abs() + 1e-15);
            }
        }
    }

    #[test]
    fn slope_rows_vanish_at_exactly_identified_tsls() {
        // with an intercept and d_Z = d_X the 2SLS normal equations zero the
        // demeaned slope moments exactly
        let ds = small_iv_dataset();
        let fit = classical::tsls_fit(&ds).unwrap();
        let tau = QuantileLevel::new(0.5).unwrap();
        let set = MomentSet::new(MomentKind::Aggressive2sls, 0.5).unwrap();
        let ev = sample_moments(&ds, &fit.beta, tau, &set).unwrap();
        for row in ds.d_z()..set.dim(&ds) {
            assert!(
                ev.mean[row].abs() < 1e-12,
                "slope moment {row} = {}",
                ev.mean[row]
            );
        }
    }
}
