//! Bootstrap averaging over the IVQR, 2SLS, and QR estimators: find the
//! simplex weights that minimize bootstrap-world RMSE around the
//! original-sample IVQR estimate, then apply them to the original estimates.

use crate::classical::{qr_fit, tsls_fit};
use crate::data::{Dataset, QuantileLevel};
use crate::error::{Error, Result};
use crate::gmm::{initial_mm_from, GmmConfig};
use crate::rng::keyed_rng;
use crate::smoothing::{default_smoothing_bandwidth, robust_residual_scale};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

/// Weights on (IVQR, 2SLS, QR); nonnegative and summing to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightTriple {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl WeightTriple {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        let ok = [w1, w2, w3].iter().all(|w| (0.0..=1.0).contains(w))
            && (w1 + w2 + w3 - 1.0).abs() <= 1e-12;
        if !ok {
            return Err(Error::InvalidData(format!(
                "weights must be a point on the unit simplex, got ({w1}, {w2}, {w3})"
            )));
        }
        Ok(Self { w1, w2, w3 })
    }
}

/// All simplex points `(a/k, b/k, c/k)` with nonnegative integers summing to
/// `k`, in lexicographic order of `(a, b)`; `(k+1)(k+2)/2` points.
pub fn simplex_weight_grid(steps: usize) -> Vec<WeightTriple> {
    let k = steps.max(1);
    let kf = k as f64;
    let mut grid = Vec::with_capacity((k + 1) * (k + 2) / 2);
    for a in 0..=k {
        for b in 0..=(k - a) {
            let c = k - a - b;
            grid.push(WeightTriple {
                w1: a as f64 / kf,
                w2: b as f64 / kf,
                w3: c as f64 / kf,
            });
        }
    }
    grid
}

/// Output of the bootstrap averaging run.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub optimal_weight: WeightTriple,
    /// The optimal weights applied to the original-sample estimates.
    pub beta_bs: DVector<f64>,
    /// Bootstrap RMSE per grid point, in grid order.
    pub grid_rmse: Vec<f64>,
    /// Number of bootstrap draws that produced fits.
    pub draws_used: usize,
    /// Draws abandoned after one redraw.
    pub draws_skipped: usize,
    /// Original-sample component estimates (IVQR, 2SLS, QR).
    pub beta_ivqr: DVector<f64>,
    pub beta_tsls: DVector<f64>,
    pub beta_qr: DVector<f64>,
}

/// Row indices of one pairs-bootstrap resample.
pub fn resample_indices<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

// Argmin over the grid; exact ties go to larger IVQR weight, then larger QR
// weight, so the winner does not depend on grid order.
fn select_best(grid: &[WeightTriple], rmse: &[f64]) -> usize {
    let mut best = 0usize;
    for s in 1..grid.len() {
        let better = rmse[s] < rmse[best]
            || (rmse[s] == rmse[best]
                && (grid[s].w1 > grid[best].w1
                    || (grid[s].w1 == grid[best].w1 && grid[s].w3 > grid[best].w3)));
        if better {
            best = s;
        }
    }
    best
}

// IVQR estimate via the projected-instrument exactly identified route, with
// the bandwidth recomputed from the sample at hand.
fn ivqr_component(data: &Dataset, tau: QuantileLevel, warm: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = robust_residual_scale(&tsls_fit(data)?.residuals);
    let h = default_smoothing_bandwidth(data, tau, scale)?;
    Ok(initial_mm_from(data, tau, h, warm)?.beta)
}

fn refit_triple(
    data: &Dataset,
    tau: QuantileLevel,
    warm: &DVector<f64>,
) -> Result<[DVector<f64>; 3]> {
    let ivqr = ivqr_component(data, tau, warm)?;
    let tsls = tsls_fit(data)?.beta;
    let qr = qr_fit(data, tau)?.beta;
    Ok([ivqr, tsls, qr])
}

/// Bootstrap three-way averaging.
///
/// Fits the three component estimators on the original sample; for each of
/// `b_draws` pairs-bootstrap resamples refits all three; scores every grid
/// point by the RMSE of the weighted combination around the original IVQR
/// estimate (treated as the bootstrap-world truth); and applies the best
/// weights to the original estimates. Ties go to larger IVQR weight, then
/// larger QR weight. A failed draw is redrawn once, then skipped; more than
/// 10% skips abort the call. Draws use independent keyed streams, so the
/// result does not depend on the parallel schedule.
pub fn bootstrap_average(
    data: &Dataset,
    tau: QuantileLevel,
    b_draws: usize,
    grid: &[WeightTriple],
    seed: u64,
    _cfg: &GmmConfig,
) -> Result<BootstrapResult> {
    if b_draws == 0 {
        return Err(Error::InvalidData(
            "bootstrap needs at least one draw".into(),
        ));
    }
    if grid.is_empty() {
        return Err(Error::InvalidData("empty weight grid".into()));
    }
    let n = data.n();
    let tsls0 = tsls_fit(data)?;
    let beta_ivqr = ivqr_component(data, tau, &tsls0.beta)?;
    let beta_tsls = tsls0.beta.clone();
    let beta_qr = qr_fit(data, tau)?.beta;

    // Per-draw deviations of the three component fits from the bootstrap
    // truth; collected in draw order for a deterministic reduction.
    let draws: Vec<Option<[DVector<f64>; 3]>> = (0..b_draws)
        .into_par_iter()
        .map(|b| {
            for retry in 0..2u64 {
                let mut rng = keyed_rng(seed, &[b as u64, retry]);
                let idx = resample_indices(&mut rng, n);
                let Ok(resampled) = data.resample(&idx) else {
                    continue;
                };
                if let Ok(fits) = refit_triple(&resampled, tau, &beta_ivqr) {
                    return Some(fits);
                }
            }
            None
        })
        .collect();

    let draws_used = draws.iter().filter(|d| d.is_some()).count();
    let draws_skipped = b_draws - draws_used;
    if draws_skipped * 10 > b_draws {
        return Err(Error::Bootstrap(format!(
            "{draws_skipped} of {b_draws} bootstrap draws failed to refit"
        )));
    }
    if draws_used == 0 {
        return Err(Error::Bootstrap("every bootstrap draw failed".into()));
    }

    // RMSE_s^2 = w' Q w with Q the average Gram matrix of the deviations.
    let mut q = DMatrix::<f64>::zeros(3, 3);
    for d in draws.iter().flatten() {
        let dev: Vec<DVector<f64>> = d.iter().map(|f| f - &beta_ivqr).collect();
        for r in 0..3 {
            for c in 0..3 {
                q[(r, c)] += dev[r].dot(&dev[c]);
            }
        }
    }
    q /= draws_used as f64;

    let mut grid_rmse = Vec::with_capacity(grid.len());
    for w in grid {
        let wv = DVector::from_vec(vec![w.w1, w.w2, w.w3]);
        let val = (wv.transpose() * &q * &wv)[(0, 0)].max(0.0).sqrt();
        grid_rmse.push(val);
    }

    let w = grid[select_best(grid, &grid_rmse)];
    let beta_bs = &beta_ivqr * w.w1 + &beta_tsls * w.w2 + &beta_qr * w.w3;

    Ok(BootstrapResult {
        optimal_weight: w,
        beta_bs,
        grid_rmse,
        draws_used,
        draws_skipped,
        beta_ivqr,
        beta_tsls,
        beta_qr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_and_contents() {
        let g1 = simplex_weight_grid(1);
        assert_eq!(g1.len(), 3);
        assert!(g1.contains(&WeightTriple {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0
        }));
        assert!(g1.contains(&WeightTriple {
            w1: 0.0,
            w2: 1.0,
            w3: 0.0
        }));
        assert!(g1.contains(&WeightTriple {
            w1: 0.0,
            w2: 0.0,
            w3: 1.0
        }));

        let g2 = simplex_weight_grid(2);
        assert_eq!(g2.len(), 6);
        assert!(g2.contains(&WeightTriple {
            w1: 0.5,
            w2: 0.5,
            w3: 0.0
        }));

        assert_eq!(simplex_weight_grid(164).len(), 13_695);
    }

    #[test]
    fn grid_is_lexicographic_in_integer_parts() {
        let g = simplex_weight_grid(3);
        for w in g.windows(2) {
            let key = |t: &WeightTriple| (t.w1, t.w2);
            assert!(key(&w[0]) < key(&w[1]));
        }
    }

    #[test]
    fn weight_triple_validation() {
        assert!(WeightTriple::new(0.2, 0.3, 0.5).is_ok());
        assert!(WeightTriple::new(0.5, 0.6, -0.1).is_err());
        assert!(WeightTriple::new(0.5, 0.4, 0.2).is_err());
    }

    fn line_dataset() -> Dataset {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let n = xs.len();
        let mut exog = DMatrix::from_element(n, 2, 1.0);
        let mut y = DVector::zeros(n);
        for (i, &x) in xs.iter().enumerate() {
            exog[(i, 1)] = x;
            y[i] = 2.0 + 3.0 * x;
        }
        Dataset::new(y, exog, DMatrix::zeros(n, 0), DMatrix::zeros(n, 0)).unwrap()
    }

    #[test]
    fn single_point_grid_returns_ivqr() {
        let ds = line_dataset();
        let tau = QuantileLevel::new(0.5).unwrap();
        let grid = [WeightTriple {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
        }];
        let res = bootstrap_average(&ds, tau, 3, &grid, 99, &GmmConfig::default()).unwrap();
        assert_eq!(res.beta_bs, res.beta_ivqr);
    }

    #[test]
    fn noiseless_tie_breaks_to_ivqr() {
        // exact line at the median: IVQR, 2SLS, and QR coincide up to solver
        // rounding, every grid point scores essentially the same, and the
        // winner is (1, 0, 0)
        let ds = line_dataset();
        let tau = QuantileLevel::new(0.5).unwrap();
        let grid = simplex_weight_grid(4);
        let res = bootstrap_average(&ds, tau, 4, &grid, 7, &GmmConfig::default()).unwrap();
        assert_eq!(
            res.optimal_weight,
            WeightTriple {
                w1: 1.0,
                w2: 0.0,
                w3: 0.0
            }
        );
        assert!(res.grid_rmse.iter().all(|&v| v < 1e-6));
    }

    #[test]
    fn tie_break_prefers_ivqr_then_qr() {
        let grid = simplex_weight_grid(2);
        // all tied: the vertex (1, 0, 0) wins
        let tied = vec![1.0; grid.len()];
        let w = grid[select_best(&grid, &tied)];
        assert_eq!(
            w,
            WeightTriple {
                w1: 1.0,
                w2: 0.0,
                w3: 0.0
            }
        );
        // tie among points with the same w1: larger w3 wins
        let mut rmse = vec![9.0; grid.len()];
        for (s, g) in grid.iter().enumerate() {
            if g.w1 == 0.5 {
                rmse[s] = 1.0;
            }
        }
        let w = grid[select_best(&grid, &rmse)];
        assert_eq!(
            w,
            WeightTriple {
                w1: 0.5,
                w2: 0.0,
                w3: 0.5
            }
        );
    }

    #[test]
    fn grid_rmse_invariant_to_grid_order() {
        let ds = line_dataset();
        let tau = QuantileLevel::new(0.5).unwrap();
        let grid = simplex_weight_grid(2);
        let mut reversed = grid.clone();
        reversed.reverse();
        let a = bootstrap_average(&ds, tau, 3, &grid, 5, &GmmConfig::default()).unwrap();
        let b = bootstrap_average(&ds, tau, 3, &reversed, 5, &GmmConfig::default()).unwrap();
        let mut b_rmse = b.grid_rmse.clone();
        b_rmse.reverse();
        assert_eq!(a.grid_rmse, b_rmse);
    }

    #[test]
    fn deterministic_across_calls() {
        let ds = line_dataset();
        let tau = QuantileLevel::new(0.4).unwrap();
        let grid = simplex_weight_grid(3);
        let a = bootstrap_average(&ds, tau, 6, &grid, 123, &GmmConfig::default()).unwrap();
        let b = bootstrap_average(&ds, tau, 6, &grid, 123, &GmmConfig::default()).unwrap();
        assert_eq!(a.beta_bs, b.beta_bs);
        assert_eq!(a.grid_rmse, b.grid_rmse);
        assert_eq!(a.optimal_weight, b.optimal_weight);
    }

    #[test]
    fn convex_hull_property() {
        let ds = line_dataset();
        let tau = QuantileLevel::new(0.3).unwrap();
        let grid = simplex_weight_grid(5);
        let res = bootstrap_average(&ds, tau, 5, &grid, 17, &GmmConfig::default()).unwrap();
        for j in 0..ds.d_x() {
            let lo = res.beta_ivqr[j].min(res.beta_tsls[j]).min(res.beta_qr[j]) - 1e-12;
            let hi = res.beta_ivqr[j].max(res.beta_tsls[j]).max(res.beta_qr[j]) + 1e-12;
            assert!(res.beta_bs[j] >= lo && res.beta_bs[j] <= hi);
        }
    }
}
