//! Core data containers shared by every estimator: the dataset with its
//! regressor/instrument blocks, quantile levels, moment-set descriptors,
//! and the common estimator result type.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Observed data split into the blocks the estimators care about.
///
/// The estimation design is `X = [x_exog | d_endog]` and the full instrument
/// matrix is `Z = [x_exog | z_excl]`; both are cached at construction.
/// When the first exogenous column is identically one it is treated as an
/// intercept, which matters for the 2SLS slope moments (they demean only the
/// non-intercept instruments).
#[derive(Debug, Clone)]
pub struct Dataset {
    y: DVector<f64>,
    x_exog: DMatrix<f64>,
    d_endog: DMatrix<f64>,
    z_excl: DMatrix<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    has_intercept: bool,
}

fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn hcat(blocks: &[&DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut at = 0;
    for b in blocks {
        out.view_mut((0, at), (n, b.ncols())).copy_from(*b);
        at += b.ncols();
    }
    out
}

impl Dataset {
    /// Validates shapes, the order condition `d_Z >= d_X`, and finiteness,
    /// then caches the stacked design and instrument matrices.
    pub fn new(
        y: DVector<f64>,
        x_exog: DMatrix<f64>,
        d_endog: DMatrix<f64>,
        z_excl: DMatrix<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidData("empty outcome vector".into()));
        }
        for (name, block) in [
            ("x_exog", &x_exog),
            ("d_endog", &d_endog),
            ("z_excl", &z_excl),
        ] {
            if block.ncols() > 0 && block.nrows() != n {
                return Err(Error::InvalidData(format!(
                    "{name} has {} rows but y has {n}",
                    block.nrows()
                )));
            }
        }
        let d_x = x_exog.ncols() + d_endog.ncols();
        let d_z = x_exog.ncols() + z_excl.ncols();
        if d_x == 0 {
            return Err(Error::InvalidData("no regressors".into()));
        }
        if d_z < d_x {
            return Err(Error::InvalidData(format!(
                "order condition violated: d_Z = {d_z} < d_X = {d_x}"
            )));
        }
        if n < d_x + 1 {
            return Err(Error::InvalidData(format!(
                "need at least d_X + 1 = {} observations, got {n}",
                d_x + 1
            )));
        }
        if !y.iter().all(|v| v.is_finite())
            || !all_finite_mat(&x_exog)
            || !all_finite_mat(&d_endog)
            || !all_finite_mat(&z_excl)
        {
            return Err(Error::InvalidData("non-finite entries in data".into()));
        }

        // Resize empty blocks so row counts stay consistent for concatenation.
        let fix = |m: DMatrix<f64>| {
            if m.ncols() == 0 {
                DMatrix::zeros(n, 0)
            } else {
                m
            }
        };
        let x_exog = fix(x_exog);
        let d_endog = fix(d_endog);
        let z_excl = fix(z_excl);

        let x = hcat(&[&x_exog, &d_endog], n);
        let z = hcat(&[&x_exog, &z_excl], n);
        let has_intercept = x_exog.ncols() > 0 && x_exog.column(0).iter().all(|&v| v == 1.0);

        Ok(Self {
            y,
            x_exog,
            d_endog,
            z_excl,
            x,
            z,
            has_intercept,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn d_exog(&self) -> usize {
        self.x_exog.ncols()
    }

    pub fn d_endog(&self) -> usize {
        self.d_endog.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Full regressor matrix `[x_exog | d_endog]`.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Full instrument matrix `[x_exog | z_excl]`.
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn x_exog(&self) -> &DMatrix<f64> {
        &self.x_exog
    }

    pub fn endog(&self) -> &DMatrix<f64> {
        &self.d_endog
    }

    pub fn z_excl(&self) -> &DMatrix<f64> {
        &self.z_excl
    }

    /// Whether the first exogenous column is an all-ones intercept.
    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    /// Column indices of `Z` that are not the intercept.
    pub fn noninstrument_intercept_cols(&self) -> Vec<usize> {
        let skip = usize::from(self.has_intercept);
        (skip..self.d_z()).collect()
    }

    /// New dataset consisting of the given rows (with repetition); used by
    /// the pairs bootstrap.
    pub fn resample(&self, idx: &[usize]) -> Result<Self> {
        let m = idx.len();
        let pick_vec = DVector::from_fn(m, |i, _| self.y[idx[i]]);
        let pick = |src: &DMatrix<f64>| DMatrix::from_fn(m, src.ncols(), |i, j| src[(idx[i], j)]);
        Dataset::new(
            pick_vec,
            pick(&self.x_exog),
            pick(&self.d_endog),
            pick(&self.z_excl),
        )
    }
}

/// A quantile level, constrained to the open unit interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidData(format!(
                "quantile level must lie strictly between 0 and 1, got {tau}"
            )));
        }
        Ok(Self(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Which moment stack an estimator uses.
///
/// `Conservative` is the plain instrument-times-indicator stack;
/// `AggressiveQr` appends the endogenous-regressor quantile moments;
/// `Aggressive2sls` appends the demeaned-instrument slope moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentKind {
    Conservative,
    AggressiveQr,
    Aggressive2sls,
}

/// A moment stack together with its smoothing bandwidth.
#[derive(Debug, Clone, Copy)]
pub struct MomentSet {
    pub kind: MomentKind,
    pub bandwidth: f64,
}

impl MomentSet {
    pub fn new(kind: MomentKind, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidData(format!(
                "smoothing bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self { kind, bandwidth })
    }

    /// Number of moment rows this stack produces on `data`.
    pub fn dim(&self, data: &Dataset) -> usize {
        match self.kind {
            MomentKind::Conservative => data.d_z(),
            MomentKind::AggressiveQr => data.d_z() + data.d_endog(),
            MomentKind::Aggressive2sls => {
                data.d_z() + data.d_z() - usize::from(data.has_intercept())
            }
        }
    }
}

/// Coefficients plus solver diagnostics returned by the GMM estimators.
#[derive(Debug, Clone)]
pub struct EstimatorResult {
    pub beta: DVector<f64>,
    pub objective: f64,
    pub bandwidth_used: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the weighting matrix had to be ridge-regularized.
    pub weighting_ridged: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn rejects_order_condition_violation() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let d = DMatrix::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 2.0, 1.0, 0.5, 0.25]);
        let err = Dataset::new(y, ones(4), d, DMatrix::zeros(4, 1)).unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
    }

    #[test]
    fn rejects_non_finite() {
        let y = DVector::from_vec(vec![1.0, f64::NAN, 3.0]);
        let err = Dataset::new(y, ones(3), DMatrix::zeros(3, 0), DMatrix::zeros(3, 0));
        assert!(err.is_err());
    }

    #[test]
    fn detects_intercept_and_stacks_blocks() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let d = DMatrix::from_vec(3, 1, vec![0.0, 1.0, 0.0]);
        let z = DMatrix::from_vec(3, 1, vec![1.0, 0.0, 1.0]);
        let ds = Dataset::new(y, ones(3), d, z).unwrap();
        assert!(ds.has_intercept());
        assert_eq!(ds.d_x(), 2);
        assert_eq!(ds.d_z(), 2);
        assert_eq!(ds.x()[(1, 1)], 1.0);
        assert_eq!(ds.z()[(0, 1)], 1.0);
        assert_eq!(ds.noninstrument_intercept_cols(), vec![1]);
    }

    #[test]
    fn moment_set_dims() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let d = DMatrix::from_vec(4, 1, vec![0.0, 1.0, 0.0, 1.0]);
        let z = DMatrix::from_vec(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.5, 0.25, 0.5, 1.0]);
        let ds = Dataset::new(y, ones(4), d, z).unwrap();
        let h = 0.1;
        assert_eq!(
            MomentSet::new(MomentKind::Conservative, h)
                .unwrap()
                .dim(&ds),
            3
        );
        assert_eq!(
            MomentSet::new(MomentKind::AggressiveQr, h)
                .unwrap()
                .dim(&ds),
            4
        );
        // intercept excluded from the slope rows
        assert_eq!(
            MomentSet::new(MomentKind::Aggressive2sls, h)
                .unwrap()
                .dim(&ds),
            5
        );
    }

    #[test]
    fn quantile_level_range() {
        assert!(QuantileLevel::new(0.5).is_ok());
        assert!(QuantileLevel::new(0.0).is_err());
        assert!(QuantileLevel::new(1.0).is_err());
        assert!(QuantileLevel::new(f64::NAN).is_err());
    }

    #[test]
    fn resample_repeats_rows() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let ds = Dataset::new(y, ones(3), DMatrix::zeros(3, 0), DMatrix::zeros(3, 0)).unwrap();
        let rs = ds.resample(&[2, 2, 0]).unwrap();
        assert_eq!(rs.y().as_slice(), &[3.0, 3.0, 1.0]);
    }
}
