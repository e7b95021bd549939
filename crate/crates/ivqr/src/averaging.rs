//! Empirical averaging weight and the GMM averaging pipeline: conservative
//! and aggressive estimates, sandwich variances, and their convex
//! combination.

use crate::classical::{qr_fit, tsls_fit, LinearFit};
use crate::data::{Dataset, EstimatorResult, MomentKind, MomentSet, QuantileLevel};
use crate::error::{Error, Result};
use crate::gmm::{initial_mm_estimate, two_step_gmm_from, GmmConfig};
use crate::linalg::robust_spd_inverse;
use crate::moments::moment_covariance;
use crate::smoothing::{
    default_smoothing_bandwidth, estimate_jacobian, kato_plugin_bandwidth,
    nonparametric_ivqr_bandwidth, robust_residual_scale, BandwidthMethod, BandwidthReport,
    PluginVariant,
};
use nalgebra::{DMatrix, DVector};

/// Which additional moments the aggressive stack appends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdditionalMoments {
    /// Endogenous-regressor quantile moments.
    Qr,
    /// Demeaned-instrument 2SLS slope moments.
    TwoSlsSlope,
}

impl AdditionalMoments {
    pub fn kind(self) -> MomentKind {
        match self {
            AdditionalMoments::Qr => MomentKind::AggressiveQr,
            AdditionalMoments::TwoSlsSlope => MomentKind::Aggressive2sls,
        }
    }
}

/// How the Jacobian bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianBandwidth {
    /// Gaussian plug-in with cross regressor/instrument moments (default).
    PluginGaussian,
    /// Cell-wise nonparametric rule for small discrete designs.
    NonparametricBinary,
}

/// Tuning for the averaging pipeline beyond the GMM solver itself.
#[derive(Debug, Clone)]
pub struct AveragingOptions {
    /// Diagonal of the loss-weighting matrix; identity when absent.
    pub upsilon: Option<DVector<f64>>,
    /// Pin the averaging weight instead of estimating it.
    pub force_weight: Option<f64>,
    pub jacobian_bandwidth: JacobianBandwidth,
}

impl Default for AveragingOptions {
    fn default() -> Self {
        Self {
            upsilon: None,
            force_weight: None,
            jacobian_bandwidth: JacobianBandwidth::PluginGaussian,
        }
    }
}

/// Outcome of the empirical weight formula.
#[derive(Debug, Clone, Copy)]
pub struct WeightEstimate {
    /// Clamped to [0, 1].
    pub value: f64,
    /// The formula's raw value before clamping.
    pub raw: f64,
    /// Both the trace term and the parameter gap vanished.
    pub degenerate: bool,
}

/// Sample analog of the optimal averaging weight,
///
/// ```text
/// w = tr(U (S1 - S2)) / (n (b1 - b2)' U (b1 - b2) + tr(U (S1 - S2)))
/// ```
///
/// clamped to the unit interval; the raw value is preserved for diagnostics.
pub fn empirical_weight(
    beta1: &DVector<f64>,
    beta2: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    upsilon: &DVector<f64>,
    n: usize,
) -> Result<WeightEstimate> {
    let d = beta1.len();
    if beta2.len() != d
        || sigma1.nrows() != d
        || sigma1.ncols() != d
        || sigma2.nrows() != d
        || sigma2.ncols() != d
        || upsilon.len() != d
    {
        return Err(Error::InvalidData(
            "dimension mismatch in empirical weight".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidData("empirical weight needs n >= 1".into()));
    }
    if upsilon.iter().any(|&u| u < 0.0) {
        return Err(Error::InvalidData(
            "upsilon must have nonnegative entries".into(),
        ));
    }
    let mut trace = 0.0;
    let mut quad = 0.0;
    for j in 0..d {
        trace += upsilon[j] * (sigma1[(j, j)] - sigma2[(j, j)]);
        let diff = beta1[j] - beta2[j];
        quad += upsilon[j] * diff * diff;
    }
    quad *= n as f64;
    let denom = quad + trace;
    if denom == 0.0 {
        return Ok(WeightEstimate {
            value: 0.0,
            raw: 0.0,
            degenerate: true,
        });
    }
    let raw = trace / denom;
    Ok(WeightEstimate {
        value: raw.clamp(0.0, 1.0),
        raw,
        degenerate: false,
    })
}

/// Everything the averaging pipeline produces.
#[derive(Debug, Clone)]
pub struct AveragingResult {
    pub beta_conservative: DVector<f64>,
    pub beta_aggressive: DVector<f64>,
    /// Sandwich variance of the conservative estimator, `d_X x d_X`.
    pub sigma1: DMatrix<f64>,
    /// Sandwich variance of the aggressive estimator.
    pub sigma2: DMatrix<f64>,
    /// Averaging weight in [0, 1].
    pub weight: f64,
    /// Raw weight before clamping.
    pub weight_raw: f64,
    pub weight_degenerate: bool,
    pub beta_avg: DVector<f64>,
    /// Diagonal of the loss weighting used.
    pub upsilon: DVector<f64>,
    /// Estimation (smoothing) bandwidth used by the moment stacks.
    pub smoothing_bandwidth: f64,
    /// How the Jacobian bandwidth was obtained.
    pub jacobian_bandwidth: BandwidthReport,
    /// Any sandwich inversion needed a ridge.
    pub variance_ridged: bool,
    pub conservative: EstimatorResult,
    pub aggressive: EstimatorResult,
}

/// Caches the shared stages of the pipeline so the simulation harness can
/// request several estimators without recomputing the expensive pieces.
pub struct Pipeline<'a> {
    data: &'a Dataset,
    tau: QuantileLevel,
    cfg: GmmConfig,
    opts: AveragingOptions,
    tsls: Option<LinearFit>,
    qr: Option<LinearFit>,
    bandwidth: Option<f64>,
    initial: Option<EstimatorResult>,
    conservative: Option<EstimatorResult>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        data: &'a Dataset,
        tau: QuantileLevel,
        cfg: GmmConfig,
        opts: AveragingOptions,
    ) -> Self {
        Self {
            data,
            tau,
            cfg,
            opts,
            tsls: None,
            qr: None,
            bandwidth: None,
            initial: None,
            conservative: None,
        }
    }

    pub fn tsls(&mut self) -> Result<&LinearFit> {
        if self.tsls.is_none() {
            self.tsls = Some(tsls_fit(self.data)?);
        }
        Ok(self.tsls.as_ref().unwrap())
    }

    pub fn qr(&mut self) -> Result<&LinearFit> {
        if self.qr.is_none() {
            self.qr = Some(qr_fit(self.data, self.tau)?);
        }
        Ok(self.qr.as_ref().unwrap())
    }

    /// Estimation bandwidth from the robust spread of 2SLS residuals.
    pub fn smoothing_bandwidth(&mut self) -> Result<f64> {
        if self.bandwidth.is_none() {
            let scale = robust_residual_scale(&self.tsls()?.residuals);
            self.bandwidth = Some(default_smoothing_bandwidth(self.data, self.tau, scale)?);
        }
        Ok(self.bandwidth.unwrap())
    }

    /// Initial method-of-moments estimate (projected instruments).
    pub fn initial(&mut self) -> Result<&EstimatorResult> {
        if self.initial.is_none() {
            let h = self.smoothing_bandwidth()?;
            self.initial = Some(initial_mm_estimate(self.data, self.tau, h)?);
        }
        Ok(self.initial.as_ref().unwrap())
    }

    /// Conservative two-step GMM estimate.
    pub fn conservative(&mut self) -> Result<&EstimatorResult> {
        if self.conservative.is_none() {
            let h = self.smoothing_bandwidth()?;
            let beta_check = self.initial()?.beta.clone();
            let set = MomentSet::new(MomentKind::Conservative, h)?;
            self.conservative = Some(two_step_gmm_from(
                self.data,
                self.tau,
                &set,
                &self.cfg,
                &beta_check,
            )?);
        }
        Ok(self.conservative.as_ref().unwrap())
    }

    /// Aggressive two-step GMM estimate for the given additional moments.
    pub fn aggressive(&mut self, additional: AdditionalMoments) -> Result<EstimatorResult> {
        let h = self.smoothing_bandwidth()?;
        let beta_check = self.initial()?.beta.clone();
        let set = MomentSet::new(additional.kind(), h)?;
        two_step_gmm_from(self.data, self.tau, &set, &self.cfg, &beta_check)
    }

    // Jacobian bandwidth at the conservative estimate, with the documented
    // fallback chain: requested rule, then Gaussian plug-in, then the
    // default smoothing rule when the plug-in constant vanishes.
    fn jacobian_bandwidth(&mut self, residuals: &DVector<f64>) -> Result<BandwidthReport> {
        let scale = robust_residual_scale(residuals);
        if self.opts.jacobian_bandwidth == JacobianBandwidth::NonparametricBinary {
            if let Ok(rep) = nonparametric_ivqr_bandwidth(self.data, residuals) {
                return Ok(rep);
            }
        }
        match kato_plugin_bandwidth(
            self.data.x(),
            self.data.z(),
            self.tau,
            scale,
            PluginVariant::Ivqr,
        ) {
            Ok(rep) => Ok(rep),
            Err(Error::DegenerateBandwidth(_)) => {
                let h = default_smoothing_bandwidth(self.data, self.tau, scale)?;
                Ok(BandwidthReport {
                    h,
                    alpha_tau: None,
                    sigma_hat: Some(scale),
                    method: BandwidthMethod::Default,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Full averaging estimate for the given additional moments.
    pub fn averaging(&mut self, additional: AdditionalMoments) -> Result<AveragingResult> {
        let h = self.smoothing_bandwidth()?;
        let conservative = self.conservative()?.clone();
        let aggressive = self.aggressive(additional)?;
        let beta1 = conservative.beta.clone();
        let beta2 = aggressive.beta.clone();

        let residuals = self.data.y() - self.data.x() * &beta1;
        let jac_bw = self.jacobian_bandwidth(&residuals)?;

        let set1 = MomentSet::new(MomentKind::Conservative, h)?;
        let set2 = MomentSet::new(additional.kind(), h)?;
        let mut ridged = false;
        let mut sandwich = |set: &MomentSet| -> Result<DMatrix<f64>> {
            let sigma = moment_covariance(self.data, &beta1, self.tau, set)?;
            let (w, r1) = robust_spd_inverse(&sigma, self.cfg.weighting_ridge)?;
            let g = estimate_jacobian(self.data, &beta1, self.tau, jac_bw.h, set)?;
            let bread = g.transpose() * w * g;
            let (inv, r2) = robust_spd_inverse(&bread, self.cfg.weighting_ridge)?;
            ridged |= r1 || r2;
            Ok(inv)
        };
        let sigma1 = sandwich(&set1)?;
        let sigma2 = sandwich(&set2)?;

        let upsilon = self
            .opts
            .upsilon
            .clone()
            .unwrap_or_else(|| DVector::from_element(self.data.d_x(), 1.0));
        let west = empirical_weight(&beta1, &beta2, &sigma1, &sigma2, &upsilon, self.data.n())?;
        let (weight, raw, degenerate) = match self.opts.force_weight {
            Some(w) => (w.clamp(0.0, 1.0), west.raw, west.degenerate),
            None => (west.value, west.raw, west.degenerate),
        };
        let beta_avg = &beta1 * (1.0 - weight) + &beta2 * weight;

        Ok(AveragingResult {
            beta_conservative: beta1,
            beta_aggressive: beta2,
            sigma1,
            sigma2,
            weight,
            weight_raw: raw,
            weight_degenerate: degenerate,
            beta_avg,
            upsilon,
            smoothing_bandwidth: h,
            jacobian_bandwidth: jac_bw,
            variance_ridged: ridged,
            conservative,
            aggressive,
        })
    }
}

/// One-shot averaging estimate with default options.
pub fn averaging_estimate(
    data: &Dataset,
    tau: QuantileLevel,
    additional: AdditionalMoments,
    cfg: &GmmConfig,
) -> Result<AveragingResult> {
    Pipeline::new(data, tau, cfg.clone(), AveragingOptions::default()).averaging(additional)
}

/// One-shot averaging estimate with explicit options.
pub fn averaging_estimate_with(
    data: &Dataset,
    tau: QuantileLevel,
    additional: AdditionalMoments,
    cfg: &GmmConfig,
    opts: &AveragingOptions,
) -> Result<AveragingResult> {
    Pipeline::new(data, tau, cfg.clone(), opts.clone()).averaging(additional)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{gen_model2, ErrorKind, Model2Params};
    use crate::rng::keyed_rng;
    use nalgebra::dvector;

    #[test]
    fn weight_arithmetic_identities() {
        // trace term 2, quadratic term n * diff^2 = 6 -> 2 / (6 + 2) = 0.25
        let b1 = dvector![0.0];
        let b2 = dvector![1.0];
        let s1 = DMatrix::from_element(1, 1, 3.0);
        let s2 = DMatrix::from_element(1, 1, 1.0); // trace diff = 2
        let ups = dvector![1.0];
        let w = empirical_weight(&b1, &b2, &s1, &s2, &ups, 6).unwrap();
        assert_eq!(w.raw, 0.25);
        assert_eq!(w.value, 0.25);

        // equal betas -> weight 1
        let w = empirical_weight(&b1, &b1, &s1, &s2, &ups, 5).unwrap();
        assert_eq!(w.value, 1.0);

        // zero trace with distinct betas -> weight 0
        let w = empirical_weight(&b1, &b2, &s2, &s2, &ups, 5).unwrap();
        assert_eq!(w.value, 0.0);

        // fully degenerate -> 0 with flag
        let w = empirical_weight(&b1, &b1, &s2, &s2, &ups, 5).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.value, 0.0);
    }

    #[test]
    fn weight_clamps_negative_trace() {
        // trace term -1, quadratic term 10: raw weight is negative
        let b1 = dvector![0.0];
        let b2 = dvector![1.0];
        let s1 = DMatrix::from_element(1, 1, 1.0);
        let s2 = DMatrix::from_element(1, 1, 2.0);
        let ups = dvector![1.0];
        let w = empirical_weight(&b1, &b2, &s1, &s2, &ups, 10).unwrap();
        assert!(w.raw < 0.0);
        assert_eq!(w.value, 0.0);
    }

    #[test]
    fn weight_invariant_to_upsilon_scaling() {
        let b1 = dvector![1.0, -0.5];
        let b2 = dvector![0.7, 0.1];
        let s1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.5]);
        let s2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.8]);
        let u1 = dvector![1.0, 2.0];
        let u2 = &u1 * 7.5;
        let a = empirical_weight(&b1, &b2, &s1, &s2, &u1, 50).unwrap();
        let b = empirical_weight(&b1, &b2, &s1, &s2, &u2, 50).unwrap();
        assert!((a.value - b.value).abs() < 1e-14);
    }

    #[test]
    fn forced_weights_pin_the_average() {
        let p = Model2Params {
            c0: 0.1,
            error: ErrorKind::Gaussian,
        };
        let mut rng = keyed_rng(31, &[1]);
        let (ds, _) = gen_model2(&p, 250, QuantileLevel::new(0.5).unwrap(), &mut rng).unwrap();
        let tau = QuantileLevel::new(0.5).unwrap();
        let cfg = GmmConfig::default();

        let mut opts = AveragingOptions {
            force_weight: Some(0.0),
            ..Default::default()
        };
        let r0 = averaging_estimate_with(&ds, tau, AdditionalMoments::Qr, &cfg, &opts).unwrap();
        assert_eq!(r0.beta_avg, r0.beta_conservative);

        opts.force_weight = Some(1.0);
        let r1 = averaging_estimate_with(&ds, tau, AdditionalMoments::Qr, &cfg, &opts).unwrap();
        assert_eq!(r1.beta_avg, r1.beta_aggressive);
    }

    #[test]
    fn averaging_is_a_convex_combination_with_psd_sandwiches() {
        let p = Model2Params {
            c0: 0.2,
            error: ErrorKind::Gaussian,
        };
        let mut rng = keyed_rng(32, &[2]);
        let (ds, _) = gen_model2(&p, 300, QuantileLevel::new(0.5).unwrap(), &mut rng).unwrap();
        let tau = QuantileLevel::new(0.5).unwrap();
        let res = averaging_estimate(
            &ds,
            tau,
            AdditionalMoments::TwoSlsSlope,
            &GmmConfig::default(),
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&res.weight));
        let recon = &res.beta_conservative * (1.0 - res.weight) + &res.beta_aggressive * res.weight;
        assert_eq!(res.beta_avg, recon);
        for j in 0..ds.d_x() {
            let lo = res.beta_conservative[j].min(res.beta_aggressive[j]) - 1e-12;
            let hi = res.beta_conservative[j].max(res.beta_aggressive[j]) + 1e-12;
            assert!(res.beta_avg[j] >= lo && res.beta_avg[j] <= hi);
        }
        for (name, s) in [("sigma1", &res.sigma1), ("sigma2", &res.sigma2)] {
            let sym = (s + s.transpose()) * 0.5;
            let eig = sym.symmetric_eigen();
            let tr = eig.eigenvalues.sum();
            assert!(
                eig.eigenvalues.iter().all(|&e| e >= -1e-10 * tr.abs()),
                "{name} not PSD"
            );
        }
    }
}
