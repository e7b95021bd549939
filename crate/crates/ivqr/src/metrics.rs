//! Robust RMSE, empirical quantiles, and relative-rRMSE table assembly.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Order-statistic quantile with linear interpolation at index
/// `1 + (M - 1) p` (one-based); `p = 0` is the minimum, `p = 1` the maximum.
pub fn empirical_quantile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidData(
            "empirical quantile of an empty sample".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidData(format!(
            "quantile order must lie in [0,1], got {p}"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let g = (sorted.len() - 1) as f64 * p;
    let lo = g.floor() as usize;
    let hi = g.ceil() as usize;
    let frac = g - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Robust root mean squared error across replications:
/// `sqrt(sum_j [(median bias_j)^2 + (IQR_j / 1.349)^2])`.
///
/// `estimates` is `M x d` (replications by coefficients); the 1.349 constant
/// is used literally so results line up with the usual normal-reference
/// convention.
pub fn rrmse(estimates: &DMatrix<f64>, truth: &DVector<f64>) -> Result<f64> {
    let m = estimates.nrows();
    let d = estimates.ncols();
    if m < 2 {
        return Err(Error::InvalidData(format!(
            "rrmse needs at least 2 replications, got {m}"
        )));
    }
    if truth.len() != d {
        return Err(Error::InvalidData(format!(
            "truth has length {}, estimates have {d} columns",
            truth.len()
        )));
    }
    let mut acc = 0.0;
    let mut col = vec![0.0; m];
    for j in 0..d {
        for i in 0..m {
            col[i] = estimates[(i, j)];
        }
        let med = empirical_quantile(&col, 0.5)?;
        let iqr = empirical_quantile(&col, 0.75)? - empirical_quantile(&col, 0.25)?;
        let bias = med - truth[j];
        acc += bias * bias + (iqr / 1.349).powi(2);
    }
    Ok(acc.sqrt())
}

/// One estimator's replication matrix, labeled.
#[derive(Debug, Clone)]
pub struct EstimateSet {
    pub name: String,
    /// `M x d` estimates across replications.
    pub estimates: DMatrix<f64>,
}

/// Relative rRMSE cells for one DGP row.
#[derive(Debug, Clone)]
pub struct RelativeRow {
    pub names: Vec<String>,
    pub relative: Vec<f64>,
    /// Absolute rRMSE of the baseline estimator.
    pub baseline_rrmse: f64,
}

/// Divide every estimator's rRMSE by the baseline's. The baseline must be
/// present and have a nonzero rRMSE; its own cell is exactly 1.
pub fn relative_rrmse_row(
    sets: &[EstimateSet],
    truth: &DVector<f64>,
    baseline: &str,
) -> Result<RelativeRow> {
    let base = sets
        .iter()
        .find(|s| s.name == baseline)
        .ok_or_else(|| Error::InvalidData(format!("baseline estimator '{baseline}' missing")))?;
    let m = base.estimates.nrows();
    for s in sets {
        if s.estimates.nrows() != m {
            return Err(Error::InvalidData(format!(
                "estimator '{}' has {} replications, baseline has {m}",
                s.name,
                s.estimates.nrows()
            )));
        }
    }
    let base_rrmse = rrmse(&base.estimates, truth)?;
    if base_rrmse == 0.0 {
        return Err(Error::DegenerateInput(
            "baseline rRMSE is zero; relative table undefined".into(),
        ));
    }
    let mut names = Vec::with_capacity(sets.len());
    let mut relative = Vec::with_capacity(sets.len());
    for s in sets {
        names.push(s.name.clone());
        if s.name == baseline {
            relative.push(1.0);
        } else {
            relative.push(rrmse(&s.estimates, truth)? / base_rrmse);
        }
    }
    Ok(RelativeRow {
        names,
        relative,
        baseline_rrmse: base_rrmse,
    })
}

/// Relative-rRMSE cells over a family of DGPs, with a leading descriptor
/// block and the baseline's absolute rRMSE attached per row.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub baseline: String,
    pub estimators: Vec<String>,
    pub descriptor_names: Vec<String>,
    pub dgp: Vec<String>,
    pub descriptors: Vec<Vec<String>>,
    /// `rows x estimators` relative rRMSE cells.
    pub relative: Vec<Vec<f64>>,
    pub baseline_rrmse: Vec<f64>,
}

impl MetricsTable {
    pub fn new(baseline: &str, estimators: Vec<String>, descriptor_names: Vec<String>) -> Self {
        Self {
            baseline: baseline.to_string(),
            estimators,
            descriptor_names,
            dgp: Vec::new(),
            descriptors: Vec::new(),
            relative: Vec::new(),
            baseline_rrmse: Vec::new(),
        }
    }

    pub fn push_row(
        &mut self,
        dgp: String,
        descriptors: Vec<String>,
        row: RelativeRow,
    ) -> Result<()> {
        if row.names != self.estimators {
            return Err(Error::InvalidData(
                "estimator columns differ across rows".into(),
            ));
        }
        if descriptors.len() != self.descriptor_names.len() {
            return Err(Error::InvalidData(
                "descriptor width differs across rows".into(),
            ));
        }
        self.dgp.push(dgp);
        self.descriptors.push(descriptors);
        self.relative.push(row.relative);
        self.baseline_rrmse.push(row.baseline_rrmse);
        Ok(())
    }

    pub fn cell(&self, dgp: &str, estimator: &str) -> Option<f64> {
        let r = self.dgp.iter().position(|d| d == dgp)?;
        let c = self.estimators.iter().position(|e| e == estimator)?;
        Some(self.relative[r][c])
    }

    /// CSV with a header row: descriptor block, one relative column per
    /// estimator, and the baseline absolute rRMSE last.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("dgp");
        for d in &self.descriptor_names {
            out.push(',');
            out.push_str(d);
        }
        for e in &self.estimators {
            out.push(',');
            out.push_str(e);
        }
        out.push_str(&format!(",{}_rrmse\n", self.baseline));
        for r in 0..self.dgp.len() {
            out.push_str(&self.dgp[r]);
            for d in &self.descriptors[r] {
                out.push(',');
                out.push_str(d);
            }
            for v in &self.relative[r] {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.baseline_rrmse[r]));
        }
        out
    }
}

/// Build a whole table from per-DGP estimate sets.
pub fn relative_rrmse_table(
    baseline: &str,
    descriptor_names: Vec<String>,
    rows: &[(String, Vec<String>, Vec<EstimateSet>, DVector<f64>)],
) -> Result<MetricsTable> {
    let estimators: Vec<String> = rows
        .first()
        .map(|(_, _, sets, _)| sets.iter().map(|s| s.name.clone()).collect())
        .unwrap_or_default();
    let mut table = MetricsTable::new(baseline, estimators, descriptor_names);
    for (dgp, desc, sets, truth) in rows {
        let row = relative_rrmse_row(sets, truth, baseline)?;
        table.push_row(dgp.clone(), desc.clone(), row)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_hand_cases() {
        assert_eq!(
            empirical_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5).unwrap(),
            3.0
        );
        assert!((empirical_quantile(&[1.0, 2.0, 3.0, 4.0], 0.25).unwrap() - 1.75).abs() < 1e-15);
        assert_eq!(empirical_quantile(&[7.0], 0.0).unwrap(), 7.0);
        assert_eq!(empirical_quantile(&[7.0], 0.9).unwrap(), 7.0);
        assert_eq!(empirical_quantile(&[3.0, 1.0], 0.0).unwrap(), 1.0);
        assert_eq!(empirical_quantile(&[3.0, 1.0], 1.0).unwrap(), 3.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
    }

    #[test]
    fn rrmse_zero_when_exact() {
        let est = DMatrix::from_element(5, 2, 1.5);
        let truth = DVector::from_element(2, 1.5);
        assert_eq!(rrmse(&est, &truth).unwrap(), 0.0);
    }

    #[test]
    fn rrmse_iqr_hand_case() {
        let est = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let truth = DVector::from_element(1, 3.0);
        let v = rrmse(&est, &truth).unwrap();
        assert!((v - 2.0 / 1.349).abs() < 1e-12);
    }

    #[test]
    fn rrmse_matches_normal_reference() {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::keyed_rng(7, &[100]);
        let normal = Normal::new(0.4, 1.7).unwrap();
        let m = 100_000;
        let est = DMatrix::from_fn(m, 1, |_, _| normal.sample(&mut rng));
        let truth = DVector::from_element(1, 0.0);
        let v = rrmse(&est, &truth).unwrap();
        let expect = (0.4_f64.powi(2) + 1.7_f64.powi(2)).sqrt();
        assert!(
            (v - expect).abs() / expect < 0.02,
            "got {v}, expected about {expect}"
        );
    }

    #[test]
    fn rrmse_invariant_to_permutation_and_scaling() {
        let vals = [0.3, -1.0, 2.0, 0.7, 0.1, 1.4];
        let est = DMatrix::from_column_slice(6, 1, &vals);
        let truth = DVector::from_element(1, 0.2);
        let base = rrmse(&est, &truth).unwrap();

        let mut rev = vals;
        rev.reverse();
        let est_rev = DMatrix::from_column_slice(6, 1, &rev);
        assert!((rrmse(&est_rev, &truth).unwrap() - base).abs() < 1e-15);

        let c = -2.5;
        let scaled: Vec<f64> = vals.iter().map(|v| c * v).collect();
        let est_sc = DMatrix::from_column_slice(6, 1, &scaled);
        let truth_sc = DVector::from_element(1, c * 0.2);
        assert!((rrmse(&est_sc, &truth_sc).unwrap() - c.abs() * base).abs() < 1e-12);
    }

    #[test]
    fn rrmse_ignores_upper_outlier() {
        let clean = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let truth = DVector::from_element(1, 5.0);
        let base = rrmse(&DMatrix::from_column_slice(9, 1, &clean), &truth).unwrap();
        let mut dirty = clean;
        dirty[8] = 1e6;
        let v = rrmse(&DMatrix::from_column_slice(9, 1, &dirty), &truth).unwrap();
        assert_eq!(v, base);
    }

    fn toy_sets() -> (Vec<EstimateSet>, DVector<f64>) {
        let a = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_column_slice(4, 1, &[2.0, 4.0, 6.0, 8.0]);
        (
            vec![
                EstimateSet {
                    name: "base".into(),
                    estimates: a.clone(),
                },
                EstimateSet {
                    name: "same".into(),
                    estimates: a,
                },
                EstimateSet {
                    name: "wide".into(),
                    estimates: b,
                },
            ],
            DVector::from_element(1, 2.5),
        )
    }

    #[test]
    fn relative_row_identical_estimator_is_one() {
        let (sets, truth) = toy_sets();
        let row = relative_rrmse_row(&sets, &truth, "base").unwrap();
        assert_eq!(row.relative[0], 1.0);
        assert!((row.relative[1] - 1.0).abs() < 1e-12);
        assert!(row.relative[2] > 1.0);
    }

    #[test]
    fn relative_row_swap_symmetry() {
        let (mut sets, truth) = toy_sets();
        let row = relative_rrmse_row(&sets, &truth, "base").unwrap();
        sets.swap(1, 2);
        let swapped = relative_rrmse_row(&sets, &truth, "base").unwrap();
        assert_eq!(row.relative[1], swapped.relative[2]);
        assert_eq!(row.relative[2], swapped.relative[1]);
    }

    #[test]
    fn degenerate_baseline_errors() {
        let sets = vec![EstimateSet {
            name: "base".into(),
            estimates: DMatrix::from_element(3, 1, 2.5),
        }];
        let truth = DVector::from_element(1, 2.5);
        assert!(relative_rrmse_row(&sets, &truth, "base").is_err());
    }

    #[test]
    fn table_csv_layout() {
        let (sets, truth) = toy_sets();
        let rows = vec![("1".to_string(), vec!["0.2".to_string()], sets, truth)];
        let table = relative_rrmse_table("base", vec!["c0".into()], &rows).unwrap();
        let csv = table.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "dgp,c0,base,same,wide,base_rrmse");
        assert!(lines.next().unwrap().starts_with("1,0.2,1,"));
        assert_eq!(table.cell("1", "base"), Some(1.0));
    }
}
