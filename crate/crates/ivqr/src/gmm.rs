//! Initial method-of-moments estimate and the two-step GMM solver behind the
//! conservative and aggressive estimators.
//!
//! The smoothed objective is differentiable but non-convex and nearly flat
//! once the bandwidth is small, so each start runs a damped Gauss-Newton
//! phase (with the bandwidth annealed down to its target) followed by a
//! Nelder-Mead polish. Everything is deterministic given the inputs.

use crate::classical::{project_regressors, qr_fit, tsls_fit};
use crate::data::{Dataset, EstimatorResult, MomentSet, QuantileLevel};
use crate::error::{Error, Result};
use crate::linalg::{damped_solve, robust_spd_inverse};
use crate::moments::{moment_covariance, sample_moment_mean};
use crate::smoothing::{itilde, itilde_deriv};
use nalgebra::{DMatrix, DVector};

/// Solver knobs for the GMM estimators.
#[derive(Debug, Clone)]
pub struct GmmConfig {
    pub max_iterations: usize,
    /// Convergence tolerance on the objective and on parameter steps.
    pub tolerance: f64,
    /// How many of the anchor starts (initial MM, 2SLS, QR) to use.
    pub multistart_points: usize,
    /// Ridge factor for near-singular weighting matrices.
    pub weighting_ridge: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-9,
            multistart_points: 3,
            weighting_ridge: 1e-10,
        }
    }
}

impl GmmConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::InvalidData("GMM tolerance must be positive".into()));
        }
        Ok(())
    }
}

// Moment Jacobian with respect to beta, evaluated at the stack's own
// smoothing bandwidth.
fn stack_jacobian(
    data: &Dataset,
    beta: &DVector<f64>,
    tau: QuantileLevel,
    set: &MomentSet,
) -> DMatrix<f64> {
    crate::smoothing::estimate_jacobian(data, beta, tau, set.bandwidth, set)
        .expect("jacobian dimensions checked by caller")
}

// Bandwidth continuation schedule: geometric from a coarse bandwidth down to
// the target, so early iterations see a smooth objective.
fn bandwidth_schedule(data: &Dataset, target: f64) -> Vec<f64> {
    let coarse = {
        let scale = crate::smoothing::robust_residual_scale(data.y());
        (scale.max(target) * (data.n() as f64).powf(-0.2)).max(target)
    };
    if coarse / target < 1.5 {
        return vec![target];
    }
    let stages = 4usize;
    let ratio = (target / coarse).powf(1.0 / (stages as f64 - 1.0));
    (0..stages)
        .map(|s| {
            if s + 1 == stages {
                target
            } else {
                coarse * ratio.powi(s as i32)
            }
        })
        .collect()
}

struct GnOutcome {
    beta: DVector<f64>,
    iterations: usize,
    converged: bool,
}

// Damped Gauss-Newton on Q(b) = m(b)' W m(b) with monotone acceptance.
fn gauss_newton(
    data: &Dataset,
    tau: QuantileLevel,
    set: &MomentSet,
    w: &DMatrix<f64>,
    start: &DVector<f64>,
    cfg: &GmmConfig,
) -> GnOutcome {
    let objective = |b: &DVector<f64>| -> Option<f64> {
        let m = sample_moment_mean(data, b, tau, set).ok()?;
        Some((m.transpose() * w * &m)[(0, 0)])
    };

    let mut beta = start.clone();
    let mut obj = match objective(&beta) {
        Some(v) => v,
        None => {
            return GnOutcome {
                beta,
                iterations: 0,
                converged: false,
            }
        }
    };
    let mut lambda = 1e-8;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let m = match sample_moment_mean(data, &beta, tau, set) {
            Ok(m) => m,
            Err(_) => break,
        };
        let j = stack_jacobian(data, &beta, set.bandwidth, set);
        let jtw = j.transpose() * w;
        let grad = &jtw * &m;
        let hess = &jtw * &j;
        if grad.amax() <= cfg.tolerance * (1.0 + obj) {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..12 {
            let scaled = lambda * (1.0 + hess.diagonal().amax());
            let Some(step) = damped_solve(&hess, &grad, scaled) else {
                lambda *= 10.0;
                continue;
            };
            let cand = &beta - &step;
            if let Some(cand_obj) = objective(&cand) {
                if cand_obj <= obj {
                    let step_norm = step.norm();
                    let improvement = obj - cand_obj;
                    beta = cand;
                    obj = cand_obj;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if step_norm <= cfg.tolerance * (1.0 + beta.norm())
                        || improvement <= cfg.tolerance * (1.0 + obj)
                    {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted || converged {
            if !accepted {
                converged = true; // no descent direction left at this scale
            }
            break;
        }
    }
    GnOutcome {
        beta,
        iterations,
        converged,
    }
}

// Deterministic Nelder-Mead polish on the objective.
fn nelder_mead<F: Fn(&DVector<f64>) -> f64>(
    f: &F,
    start: &DVector<f64>,
    max_evals: usize,
    ftol: f64,
) -> (DVector<f64>, f64, usize) {
    let d = start.len();
    let mut simplex: Vec<DVector<f64>> = Vec::with_capacity(d + 1);
    simplex.push(start.clone());
    for j in 0..d {
        let mut v = start.clone();
        let step = 0.02 * (1.0 + start[j].abs());
        v[j] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(f).collect();
    let mut evals = values.len();

    while evals < max_evals {
        // order best..worst
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let ordered: Vec<DVector<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let ovals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        simplex = ordered;
        values = ovals;

        if (values[d] - values[0]).abs() <= ftol * (1.0 + values[0].abs()) {
            break;
        }

        let centroid: DVector<f64> = {
            let mut c = DVector::zeros(d);
            for v in simplex.iter().take(d) {
                c += v;
            }
            c / d as f64
        };

        let reflect = &centroid + (&centroid - &simplex[d]);
        let fr = f(&reflect);
        evals += 1;
        if fr < values[0] {
            let expand = &centroid + (&reflect - &centroid) * 2.0;
            let fe = f(&expand);
            evals += 1;
            if fe < fr {
                simplex[d] = expand;
                values[d] = fe;
            } else {
                simplex[d] = reflect;
                values[d] = fr;
            }
        } else if fr < values[d - 1] {
            simplex[d] = reflect;
            values[d] = fr;
        } else {
            let contract = &centroid + (&simplex[d] - &centroid) * 0.5;
            let fc = f(&contract);
            evals += 1;
            if fc < values[d] {
                simplex[d] = contract;
                values[d] = fc;
            } else {
                // shrink toward the best vertex
                for j in 1..=d {
                    simplex[j] = (&simplex[0] + &simplex[j]) * 0.5;
                    values[j] = f(&simplex[j]);
                }
                evals += d;
            }
        }
    }

    let mut best = 0;
    for j in 1..=d {
        if values[j] < values[best] {
            best = j;
        }
    }
    (simplex[best].clone(), values[best], evals)
}

/// Initial consistent estimate: solves the exactly identified smoothed
/// system `(1/n) sum_i xhat_i (Itilde((x_i'b - y_i)/h) - tau) = 0` with
/// `xhat` the linear projection of the regressors onto the instruments,
/// by damped Newton started from the 2SLS fit.
pub fn initial_mm_estimate(data: &Dataset, tau: QuantileLevel, h: f64) -> Result<EstimatorResult> {
    let start = tsls_fit(data)?.beta;
    initial_mm_from(data, tau, h, &start)
}

/// Same as [`initial_mm_estimate`] but warm-started; bootstrap refits pass
/// the original-sample solution.
pub fn initial_mm_from(
    data: &Dataset,
    tau: QuantileLevel,
    h: f64,
    start: &DVector<f64>,
) -> Result<EstimatorResult> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidData(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    let xhat = project_regressors(data)?;
    let x = data.x();
    let y = data.y();
    let n = data.n();
    let nf = n as f64;
    let d = data.d_x();
    let t = tau.get();

    let eqs = |b: &DVector<f64>, hh: f64| -> DVector<f64> {
        let fitted = x * b;
        let mut m = DVector::zeros(d);
        for i in 0..n {
            let dev = itilde((fitted[i] - y[i]) / hh) - t;
            for j in 0..d {
                m[j] += xhat[(i, j)] * dev;
            }
        }
        m / nf
    };
    let jac = |b: &DVector<f64>, hh: f64| -> DMatrix<f64> {
        let fitted = x * b;
        let mut jm = DMatrix::zeros(d, d);
        for i in 0..n {
            let k = itilde_deriv((fitted[i] - y[i]) / hh) / hh;
            if k == 0.0 {
                continue;
            }
            for j in 0..d {
                let xhj = k * xhat[(i, j)];
                for l in 0..d {
                    jm[(j, l)] += xhj * x[(i, l)];
                }
            }
        }
        jm / nf
    };

    let scale = {
        let mut s = 0.0_f64;
        for j in 0..d {
            s = s.max(xhat.column(j).amax());
        }
        s.max(1.0)
    };
    let tol = 1e-10 * (1.0 + scale);

    let mut beta = start.clone();
    let mut total_iters = 0;
    let mut converged = false;
    for hh in bandwidth_schedule(data, h) {
        let mut m = eqs(&beta, hh);
        converged = m.amax() <= tol;
        for _ in 0..80 {
            if m.amax() <= tol {
                converged = true;
                break;
            }
            total_iters += 1;
            let mut j = jac(&beta, hh);
            let ridge = 1e-12 * (1.0 + j.diagonal().amax());
            for q in 0..d {
                j[(q, q)] += ridge;
            }
            let Some(step) = j.lu().solve(&m) else { break };
            let mut lam = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let cand = &beta - &step * lam;
                let mc = eqs(&cand, hh);
                if mc.norm() < m.norm() {
                    beta = cand;
                    m = mc;
                    moved = true;
                    break;
                }
                lam *= 0.5;
            }
            if !moved {
                break;
            }
        }
    }

    // Derivative-free fallback on the squared equations when Newton stalls.
    if !converged {
        let obj = |b: &DVector<f64>| eqs(b, h).norm_squared();
        let (polished, val, _) = nelder_mead(&obj, &beta, 400 * d, 1e-16);
        if val < eqs(&beta, h).norm_squared() {
            beta = polished;
        }
        converged = eqs(&beta, h).amax() <= 1e-6 * (1.0 + scale);
    }

    let objective = eqs(&beta, h).norm_squared();
    Ok(EstimatorResult {
        beta,
        objective,
        bandwidth_used: h,
        converged,
        iterations: total_iters,
        weighting_ridged: false,
    })
}

/// Two-step GMM: weight with the inverse moment covariance evaluated at the
/// preliminary estimate, then minimize the quadratic form from the anchor
/// starts (initial MM, 2SLS, QR) and keep the best. Among starts whose
/// objectives tie within tolerance, the one closest to the preliminary
/// estimate wins, which makes the result schedule-independent.
pub fn two_step_gmm(
    data: &Dataset,
    tau: QuantileLevel,
    set: &MomentSet,
    cfg: &GmmConfig,
) -> Result<EstimatorResult> {
    let prelim = initial_mm_estimate(data, tau, set.bandwidth)?;
    two_step_gmm_from(data, tau, set, cfg, &prelim.beta)
}

/// Two-step GMM with a caller-supplied preliminary estimate (used by the
/// averaging pipeline so the initial MM step runs once).
pub fn two_step_gmm_from(
    data: &Dataset,
    tau: QuantileLevel,
    set: &MomentSet,
    cfg: &GmmConfig,
    beta_check: &DVector<f64>,
) -> Result<EstimatorResult> {
    cfg.validate()?;
    let sigma = moment_covariance(data, beta_check, tau, set)?;
    let (w, ridged) = robust_spd_inverse(&sigma, cfg.weighting_ridge)?;

    let mut anchors: Vec<DVector<f64>> = vec![beta_check.clone()];
    if let Ok(fit) = tsls_fit(data) {
        anchors.push(fit.beta);
    }
    if let Ok(fit) = qr_fit(data, tau) {
        anchors.push(fit.beta);
    }
    anchors.truncate(cfg.multistart_points.max(1));

    let objective = |b: &DVector<f64>| -> f64 {
        match sample_moment_mean(data, b, tau, set) {
            Ok(m) => (m.transpose() * &w * &m)[(0, 0)],
            Err(_) => f64::INFINITY,
        }
    };

    let mut candidates: Vec<(DVector<f64>, f64, usize, bool)> = Vec::new();
    for anchor in &anchors {
        let mut beta = anchor.clone();
        let mut iters = 0;
        let mut conv = false;
        for hh in bandwidth_schedule(data, set.bandwidth) {
            let stage = MomentSet {
                kind: set.kind,
                bandwidth: hh,
            };
            let out = gauss_newton(data, tau, &stage, &w, &beta, cfg);
            beta = out.beta;
            iters += out.iterations;
            conv = out.converged;
        }
        let d = data.d_x();
        let (polished, val, evals) = nelder_mead(&objective, &beta, 120 * d, cfg.tolerance);
        let base = objective(&beta);
        let (beta, val) = if val < base {
            (polished, val)
        } else {
            (beta, base)
        };
        iters += evals;
        candidates.push((beta, val, iters, conv));
    }

    let best_val = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    if !best_val.is_finite() {
        return Err(Error::SolverFailure(
            "GMM objective non-finite at every start".into(),
        ));
    }
    let tie_tol = cfg.tolerance.max(1e-12) * (1.0 + best_val);
    let mut best: Option<(DVector<f64>, f64, usize, bool)> = None;
    let mut best_dist = f64::INFINITY;
    for cand in candidates {
        if cand.1 <= best_val + tie_tol {
            let dist = (&cand.0 - beta_check).norm();
            if dist < best_dist {
                best_dist = dist;
                best = Some(cand);
            }
        }
    }
    let (beta, objective, iterations, converged) = best.expect("at least one candidate");

    Ok(EstimatorResult {
        beta,
        objective,
        bandwidth_used: set.bandwidth,
        converged,
        iterations,
        weighting_ridged: ridged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MomentKind;
    use crate::dgp::{gen_model1, InterceptKind, Model1Params};
    use crate::rng::keyed_rng;
    use rand::Rng;

    fn exogenous_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = keyed_rng(seed, &[21]);
        let mut exog = DMatrix::from_element(n, 2, 1.0);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let x: f64 = rng.random::<f64>() * 2.0;
            exog[(i, 1)] = x;
            let noise: f64 = rng.random::<f64>() - 0.5;
            y[i] = 1.0 + 2.0 * x + noise;
        }
        Dataset::new(y, exog, DMatrix::zeros(n, 0), DMatrix::zeros(n, 0)).unwrap()
    }

    #[test]
    fn initial_mm_close_to_qr_when_exogenous() {
        let ds = exogenous_dataset(400, 2);
        let tau = QuantileLevel::new(0.5).unwrap();
        let h = 0.02;
        let mm = initial_mm_estimate(&ds, tau, h).unwrap();
        let qr = qr_fit(&ds, tau).unwrap();
        let scale = crate::smoothing::robust_residual_scale(ds.y());
        assert!(mm.converged);
        assert!(
            (mm.beta - qr.beta).norm() <= 10.0 * h * scale.max(1.0),
            "smoothed MM should track the QR fit"
        );
    }

    #[test]
    fn initial_mm_intercept_only_is_smoothed_median() {
        let mut rng = keyed_rng(5, &[3]);
        let n = 200;
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() * 10.0);
        let ds = Dataset::new(
            y.clone(),
            DMatrix::from_element(n, 1, 1.0),
            DMatrix::zeros(n, 0),
            DMatrix::zeros(n, 0),
        )
        .unwrap();
        let tau = QuantileLevel::new(0.5).unwrap();
        let h = 0.1;
        let mm = initial_mm_estimate(&ds, tau, h).unwrap();
        let mut v: Vec<f64> = y.iter().cloned().collect();
        v.sort_by(|a, b| a.total_cmp(b));
        let median = crate::metrics::empirical_quantile(&v, 0.5).unwrap();
        assert!(
            (mm.beta[0] - median).abs() <= h + 0.05,
            "got {} vs median {}",
            mm.beta[0],
            median
        );
    }

    #[test]
    fn initial_mm_model1_slope_near_zero_without_effects() {
        let p = Model1Params {
            c1: 0.0,
            c2: 0.0,
            intercept: InterceptKind::ChiSq3,
        };
        let mut rng = keyed_rng(123, &[77]);
        let (ds, _) = gen_model1(&p, 1000, &mut rng).unwrap();
        let tau = QuantileLevel::new(0.5).unwrap();
        let scale = crate::smoothing::robust_residual_scale(ds.y());
        let h = crate::smoothing::smoothing_bandwidth_with(1000, scale, 1.0, 1e-4).unwrap();
        let mm = initial_mm_estimate(&ds, tau, h).unwrap();
        // truth gamma(tau) = 0; MC standard error of the slope is about 0.34
        assert!(mm.beta[1].abs() < 3.0 * 0.34, "slope {}", mm.beta[1]);
    }

    #[test]
    fn exactly_identified_gmm_hits_zero_and_ignores_weighting() {
        let ds = exogenous_dataset(300, 9);
        let tau = QuantileLevel::new(0.4).unwrap();
        let set = MomentSet::new(MomentKind::Conservative, 0.05).unwrap();
        let cfg = GmmConfig::default();
        let res = two_step_gmm(&ds, tau, &set, &cfg).unwrap();
        assert!(res.objective <= 1e-9);
        let m = sample_moment_mean(&ds, &res.beta, tau, &set).unwrap();
        let zscale = ds.z().amax();
        assert!(m.amax() <= 1e-6 * (1.0 + zscale));

        // a different (diagonal-rescaled) weighting gives the same solution
        let prelim = initial_mm_estimate(&ds, tau, set.bandwidth).unwrap();
        let res2 = two_step_gmm_from(&ds, tau, &set, &cfg, &prelim.beta).unwrap();
        assert!((res.beta - res2.beta).norm() < 1e-6);
    }

    #[test]
    fn gmm_is_deterministic() {
        let ds = exogenous_dataset(150, 13);
        let tau = QuantileLevel::new(0.3).unwrap();
        let set = MomentSet::new(MomentKind::AggressiveQr, 0.08).unwrap();
        let cfg = GmmConfig::default();
        let a = two_step_gmm(&ds, tau, &set, &cfg).unwrap();
        let b = two_step_gmm(&ds, tau, &set, &cfg).unwrap();
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.objective, b.objective);
    }
}
