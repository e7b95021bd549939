//! Data generators for the three simulation designs, plus error recentering
//! and true-parameter computation.

use crate::data::{Dataset, QuantileLevel};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

/// Intercept process for simulation design 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InterceptKind {
    /// Chi-squared(3) quantile function.
    ChiSq3,
    /// Student-t quantile function with the given degrees of freedom;
    /// requires a constant-zero slope.
    StudentT { dof: f64 },
}

/// Parameters for design 1 (binary instrument, binary treatment).
#[derive(Debug, Clone, Copy)]
pub struct Model1Params {
    /// Endogeneity of the take-up decision, in [0, 1].
    pub c1: f64,
    /// Treatment-effect heterogeneity; the slope is `100 c2 U^4`.
    pub c2: f64,
    pub intercept: InterceptKind,
}

impl Model1Params {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.c1) {
            return Err(Error::InvalidData(format!(
                "c1 must lie in [0,1], got {}",
                self.c1
            )));
        }
        if self.c2 < 0.0 {
            return Err(Error::InvalidData(format!(
                "c2 must be nonnegative, got {}",
                self.c2
            )));
        }
        if let InterceptKind::StudentT { dof } = self.intercept {
            if dof < 1.0 {
                return Err(Error::InvalidData(format!(
                    "t degrees of freedom must be >= 1, got {dof}"
                )));
            }
            if self.c2 != 0.0 {
                return Err(Error::InvalidData(
                    "the t-intercept variant requires a constant zero slope (c2 = 0)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Error distribution for designs 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Gaussian,
    /// Standard normal mapped through its own CDF into a chi-squared(4).
    ChiSq4Transformed,
}

/// Parameters for design 2 (six endogenous regressors, twelve instruments,
/// fixed slopes).
#[derive(Debug, Clone, Copy)]
pub struct Model2Params {
    /// Correlation between each regressor shock and the structural error;
    /// positive definiteness of the joint covariance requires c0 <= 0.4.
    pub c0: f64,
    pub error: ErrorKind,
}

impl Model2Params {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.4).contains(&self.c0) {
            return Err(Error::InvalidData(format!(
                "c0 must lie in [0, 0.4], got {}",
                self.c0
            )));
        }
        Ok(())
    }
}

/// Parameters for design 3 (design 2 with rank-based slope heterogeneity
/// and nonnegative regressor support).
#[derive(Debug, Clone, Copy)]
pub struct Model3Params {
    pub c0: f64,
    /// Scale of the rank-based random slopes `hetero * F(u)^4`.
    pub hetero: f64,
    pub error: ErrorKind,
}

impl Model3Params {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.4).contains(&self.c0) {
            return Err(Error::InvalidData(format!(
                "c0 must lie in [0, 0.4], got {}",
                self.c0
            )));
        }
        if self.hetero < 0.0 {
            return Err(Error::InvalidData(format!(
                "hetero must be nonnegative, got {}",
                self.hetero
            )));
        }
        Ok(())
    }
}

/// Base distribution of a raw error draw handed to [`recenter_error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawErrorDist {
    GaussianStd,
    ChiSq4OfGaussian,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn chi_squared(dof: f64) -> ChiSquared {
    ChiSquared::new(dof).expect("valid chi-squared dof")
}

/// Transform (when requested) and shift a raw standard normal error vector
/// so the population tau-quantile of the output is exactly zero.
pub fn recenter_error(raw: &DVector<f64>, tau: QuantileLevel, dist: RawErrorDist) -> DVector<f64> {
    let tau = tau.get();
    match dist {
        RawErrorDist::GaussianStd => {
            let shift = std_normal().inverse_cdf(tau);
            raw.map(|u| u - shift)
        }
        RawErrorDist::ChiSq4OfGaussian => {
            let chi4 = chi_squared(4.0);
            let norm = std_normal();
            let shift = chi4.inverse_cdf(tau);
            raw.map(|u| chi4.inverse_cdf(norm.cdf(u).clamp(1e-300, 1.0 - 1e-16)) - shift)
        }
    }
}

/// True structural parameters of design 1 as a function of the quantile.
#[derive(Debug, Clone, Copy)]
pub struct Model1Truth {
    c2: f64,
    intercept: InterceptKind,
}

impl Model1Truth {
    /// `(intercept, slope)` at the given quantile level.
    pub fn at(&self, tau: f64) -> DVector<f64> {
        let q = match self.intercept {
            InterceptKind::ChiSq3 => chi_squared(3.0).inverse_cdf(tau),
            InterceptKind::StudentT { dof } => StudentsT::new(0.0, 1.0, dof)
                .expect("valid dof")
                .inverse_cdf(tau),
        };
        DVector::from_vec(vec![60.0 + q, 100.0 * self.c2 * tau.powi(4)])
    }
}

/// Design 1: randomized binary offer, self-selected binary take-up, random
/// coefficients driven by a uniform rank.
pub fn gen_model1<R: Rng + ?Sized>(
    p: &Model1Params,
    n: usize,
    rng: &mut R,
) -> Result<(Dataset, Model1Truth)> {
    p.validate()?;
    let mut y = DVector::zeros(n);
    let mut d = DMatrix::zeros(n, 1);
    let mut z = DMatrix::zeros(n, 1);
    let chi3 = chi_squared(3.0);
    let t_dist = match p.intercept {
        InterceptKind::StudentT { dof } => {
            Some(StudentsT::new(0.0, 1.0, dof).expect("validated dof"))
        }
        InterceptKind::ChiSq3 => None,
    };
    for i in 0..n {
        let u: f64 = rng.random::<f64>().clamp(1e-15, 1.0 - 1e-15);
        let zi = rng.random::<f64>() < 0.5;
        let di = if zi {
            let take_prob = 0.5 + p.c1 * (u - 0.5);
            rng.random::<f64>() < take_prob
        } else {
            false
        };
        let q = match &t_dist {
            Some(t) => t.inverse_cdf(u),
            None => chi3.inverse_cdf(u),
        };
        let slope = 100.0 * p.c2 * u.powi(4);
        y[i] = 60.0 + q + slope * f64::from(di);
        d[(i, 0)] = f64::from(di);
        z[(i, 0)] = f64::from(zi);
    }
    let ds = Dataset::new(y, DMatrix::from_element(n, 1, 1.0), d, z)?;
    Ok((
        ds,
        Model1Truth {
            c2: p.c2,
            intercept: p.intercept,
        },
    ))
}

// Cholesky factor of the (eps, u) covariance [[I6, c0*1],[c0*1', 1]].
fn shock_cholesky(c0: f64) -> Result<DMatrix<f64>> {
    let mut sigma = DMatrix::identity(7, 7);
    for j in 0..6 {
        sigma[(j, 6)] = c0;
        sigma[(6, j)] = c0;
    }
    sigma.cholesky().map(|c| c.l()).ok_or_else(|| {
        Error::InvalidData(format!(
            "shock covariance not positive definite at c0 = {c0}"
        ))
    })
}

fn raw_dist(kind: ErrorKind) -> RawErrorDist {
    match kind {
        ErrorKind::Gaussian => RawErrorDist::GaussianStd,
        ErrorKind::ChiSq4Transformed => RawErrorDist::ChiSq4OfGaussian,
    }
}

struct Model23Draw {
    z: DMatrix<f64>,
    x_raw: DMatrix<f64>,
    u_raw: DVector<f64>,
}

// Shared layer of designs 2 and 3: twelve standard normal instruments,
// correlated shocks, and the raw regressors before any shift.
fn draw_model23<R: Rng + ?Sized>(
    n: usize,
    c0: f64,
    halved: bool,
    rng: &mut R,
) -> Result<Model23Draw> {
    let l = shock_cholesky(c0)?;
    let mut z = DMatrix::zeros(n, 12);
    let mut x_raw = DMatrix::zeros(n, 6);
    let mut u_raw = DVector::zeros(n);
    let mut g = DVector::zeros(7);
    for i in 0..n {
        for j in 0..12 {
            z[(i, j)] = StandardNormal.sample(rng);
        }
        for j in 0..7 {
            g[j] = StandardNormal.sample(rng);
        }
        let shocks = &l * &g;
        for j in 0..6 {
            let base = if halved {
                (z[(i, j)] + z[(i, j + 6)]) / 2.0
            } else {
                z[(i, j)] + z[(i, j + 6)]
            };
            x_raw[(i, j)] = base + shocks[j];
        }
        u_raw[i] = shocks[6];
    }
    Ok(Model23Draw { z, x_raw, u_raw })
}

/// Design 2: `Y = theta0 + 2.5 sum_j X_j + u`. The estimation design
/// carries no intercept column (the moment stack uses the twelve
/// instruments only), so the location shift recenters the composite error
/// `theta0 + u` to have tau-quantile zero; that is what makes the
/// conditional quantile restriction hold for the intercept-free design.
pub fn gen_model2<R: Rng + ?Sized>(
    p: &Model2Params,
    n: usize,
    tau: QuantileLevel,
    rng: &mut R,
) -> Result<(Dataset, DVector<f64>)> {
    p.validate()?;
    let draw = draw_model23(n, p.c0, true, rng)?;
    let v = recenter_error(&draw.u_raw, tau, raw_dist(p.error));
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..6 {
            s += draw.x_raw[(i, j)];
        }
        y[i] = 2.5 * s + v[i];
    }
    let ds = Dataset::new(y, DMatrix::zeros(n, 0), draw.x_raw, draw.z)?;
    Ok((ds, DVector::from_element(6, 2.5)))
}

/// Design 3: rank-based random slopes `hetero * F(u)^4`, regressors shifted
/// right by 3.1 population standard deviations and clipped at zero so the
/// monotonicity condition holds. The estimation design mirrors design 2
/// (no intercept, composite error recentered); truth is `hetero * tau^4`
/// for each of the six slopes.
pub fn gen_model3<R: Rng + ?Sized>(
    p: &Model3Params,
    n: usize,
    tau: QuantileLevel,
    rng: &mut R,
) -> Result<(Dataset, DVector<f64>)> {
    p.validate()?;
    let draw = draw_model23(n, p.c0, false, rng)?;
    let v = recenter_error(&draw.u_raw, tau, raw_dist(p.error));
    let norm = std_normal();
    let shift = 3.1 * 3.0_f64.sqrt();
    let mut x = draw.x_raw;
    for entry in x.iter_mut() {
        *entry = (*entry + shift).max(0.0);
    }
    let mut y = DVector::zeros(n);
    for i in 0..n {
        // the slope rank comes from the pre-transform error, which the
        // monotone chi-squared map preserves
        let theta = p.hetero * norm.cdf(draw.u_raw[i]).powi(4);
        let mut s = 0.0;
        for j in 0..6 {
            s += x[(i, j)];
        }
        y[i] = theta * s + v[i];
    }
    let ds = Dataset::new(y, DMatrix::zeros(n, 0), x, draw.z)?;
    Ok((ds, DVector::from_element(6, p.hetero * tau.get().powi(4))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    #[test]
    fn recenter_gaussian_median_is_identity() {
        let raw = DVector::from_vec(vec![0.3, -1.2, 0.9]);
        let out = recenter_error(
            &raw,
            QuantileLevel::new(0.5).unwrap(),
            RawErrorDist::GaussianStd,
        );
        assert!((out - raw).amax() < 1e-12);
    }

    #[test]
    fn recenter_gaussian_quartile_shift() {
        let raw = DVector::from_vec(vec![0.0, 1.0]);
        let out = recenter_error(
            &raw,
            QuantileLevel::new(0.25).unwrap(),
            RawErrorDist::GaussianStd,
        );
        assert!((out[0] - 0.6744897501960818).abs() < 1e-9);
    }

    #[test]
    fn recenter_chi4_is_monotone() {
        let raw = DVector::from_vec(vec![-2.0, -0.5, 0.0, 0.7, 2.4]);
        let out = recenter_error(
            &raw,
            QuantileLevel::new(0.3).unwrap(),
            RawErrorDist::ChiSq4OfGaussian,
        );
        for i in 1..raw.len() {
            assert!(out[i] > out[i - 1]);
        }
    }

    #[test]
    fn model1_no_offer_means_no_takeup() {
        let p = Model1Params {
            c1: 0.7,
            c2: 0.5,
            intercept: InterceptKind::ChiSq3,
        };
        let mut rng = keyed_rng(4, &[1]);
        let (ds, _) = gen_model1(&p, 500, &mut rng).unwrap();
        for i in 0..ds.n() {
            if ds.z_excl()[(i, 0)] == 0.0 {
                assert_eq!(ds.endog()[(i, 0)], 0.0);
            }
        }
    }

    #[test]
    fn model1_truth_formula() {
        let p = Model1Params {
            c1: 0.0,
            c2: 1.0,
            intercept: InterceptKind::ChiSq3,
        };
        let mut rng = keyed_rng(4, &[2]);
        let (_, truth) = gen_model1(&p, 50, &mut rng).unwrap();
        let t = truth.at(0.5);
        assert!((t[1] - 6.25).abs() < 1e-12);
        assert!((t[0] - (60.0 + chi_squared(3.0).inverse_cdf(0.5))).abs() < 1e-12);
    }

    #[test]
    fn model1_student_t_requires_zero_slope() {
        let p = Model1Params {
            c1: 0.2,
            c2: 0.3,
            intercept: InterceptKind::StudentT { dof: 3.0 },
        };
        assert!(gen_model1(&p, 50, &mut keyed_rng(1, &[3])).is_err());
    }

    #[test]
    fn model2_rejects_large_c0() {
        let p = Model2Params {
            c0: 0.45,
            error: ErrorKind::Gaussian,
        };
        assert!(gen_model2(
            &p,
            50,
            QuantileLevel::new(0.5).unwrap(),
            &mut keyed_rng(1, &[4])
        )
        .is_err());
    }

    #[test]
    fn model2_shapes_and_truth() {
        let p = Model2Params {
            c0: 0.2,
            error: ErrorKind::Gaussian,
        };
        let (ds, truth) = gen_model2(
            &p,
            80,
            QuantileLevel::new(0.5).unwrap(),
            &mut keyed_rng(1, &[5]),
        )
        .unwrap();
        assert_eq!(ds.d_x(), 6);
        assert_eq!(ds.d_z(), 12);
        assert!(!ds.has_intercept());
        assert_eq!(truth.len(), 6);
        assert!(truth.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn model3_hetero_zero_collapses_to_pure_error() {
        let p = Model3Params {
            c0: 0.1,
            hetero: 0.0,
            error: ErrorKind::Gaussian,
        };
        let tau = 0.4;
        let n = 4000;
        let mut rng = keyed_rng(9, &[6]);
        let (ds, truth) = gen_model3(&p, n, QuantileLevel::new(tau).unwrap(), &mut rng).unwrap();
        assert!(truth.iter().all(|&v| v == 0.0));
        // the outcome is the recentered error alone: its tau-quantile is
        // near zero and it is a recentered standard normal
        let ys: Vec<f64> = ds.y().iter().cloned().collect();
        let q = crate::metrics::empirical_quantile(&ys, tau).unwrap();
        assert!(q.abs() < 0.1, "tau-quantile of outcome = {q}");
        // nonnegative support after the shift-and-clip
        assert!(ds.endog().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn model3_truth_scales_with_tau_fourth() {
        let p = Model3Params {
            c0: 0.0,
            hetero: 1.0,
            error: ErrorKind::Gaussian,
        };
        let (_, truth) = gen_model3(
            &p,
            60,
            QuantileLevel::new(0.68).unwrap(),
            &mut keyed_rng(2, &[7]),
        )
        .unwrap();
        assert!((truth[0] - 0.68_f64.powi(4)).abs() < 1e-12);
        assert!((truth[0] - 0.21381376).abs() < 1e-6);
    }

    #[test]
    fn model1_takeup_unrelated_to_outcome_without_endogeneity() {
        // with c1 = 0 the take-up decision ignores ability, so among the
        // offered, outcome and take-up are uncorrelated (c2 = 0)
        let p = Model1Params {
            c1: 0.0,
            c2: 0.0,
            intercept: InterceptKind::ChiSq3,
        };
        let mut rng = keyed_rng(15, &[9]);
        let n = 100_000;
        let (ds, _) = gen_model1(&p, n, &mut rng).unwrap();
        let mut ys = Vec::new();
        let mut dd = Vec::new();
        for i in 0..n {
            if ds.z_excl()[(i, 0)] == 1.0 {
                ys.push(ds.y()[i]);
                dd.push(ds.endog()[(i, 0)]);
            }
        }
        let m = ys.len() as f64;
        let ybar = ys.iter().sum::<f64>() / m;
        let dbar = dd.iter().sum::<f64>() / m;
        let mut cov = 0.0;
        let mut vy = 0.0;
        let mut vd = 0.0;
        for (y, d) in ys.iter().zip(&dd) {
            cov += (y - ybar) * (d - dbar);
            vy += (y - ybar).powi(2);
            vd += (d - dbar).powi(2);
        }
        let corr = cov / (vy.sqrt() * vd.sqrt());
        assert!(corr.abs() < 0.01, "corr(Y, D | offered) = {corr}");
    }

    #[test]
    fn model3_tsls_population_slope_at_magic_quantile() {
        // the mean slope is hetero * E[F(u)^4] = hetero / 5; at tau = 0.68
        // the quantile slope nearly coincides with it
        let p = Model3Params {
            c0: 0.2,
            hetero: 1.0,
            error: ErrorKind::Gaussian,
        };
        let mut rng = keyed_rng(29, &[4]);
        let (ds, truth) =
            gen_model3(&p, 200_000, QuantileLevel::new(0.68).unwrap(), &mut rng).unwrap();
        assert!((truth[0] - 0.21381376).abs() < 1e-9);
        // the heterogeneity term leaves each slope noisy even at this n,
        // so test the average of the six slopes
        let fit = crate::classical::tsls_fit(&ds).unwrap();
        let mean_slope = fit.beta.sum() / 6.0;
        assert!(
            (mean_slope - 0.2).abs() < 0.02,
            "mean 2SLS slope = {mean_slope}"
        );
    }

    #[test]
    fn generators_are_deterministic_per_key() {
        let p = Model2Params {
            c0: 0.3,
            error: ErrorKind::ChiSq4Transformed,
        };
        let (a, _) = gen_model2(
            &p,
            40,
            QuantileLevel::new(0.3).unwrap(),
            &mut keyed_rng(42, &[8, 1]),
        )
        .unwrap();
        let (b, _) = gen_model2(
            &p,
            40,
            QuantileLevel::new(0.3).unwrap(),
            &mut keyed_rng(42, &[8, 1]),
        )
        .unwrap();
        assert_eq!(a.y().as_slice(), b.y().as_slice());
        assert_eq!(a.endog().as_slice(), b.endog().as_slice());
    }
}
