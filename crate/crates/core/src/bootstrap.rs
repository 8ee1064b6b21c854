//! Subject-level nonparametric bootstrap with bias-corrected percentile
//! intervals.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::ProxyPanel;
use crate::error::{MeError, Result};
use crate::rng;

/// Replicate estimates in replicate order; failed replicates are dropped.
#[derive(Debug, Clone)]
pub struct BootstrapDraws {
    pub estimates: Vec<Vec<f64>>,
    pub failed: usize,
    pub requested: usize,
}

/// Resampled row indices for replicate `b`.
pub fn resample_rows(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, &[b as u64]);
    (0..n).map(|_| r.random_range(0..n)).collect()
}

/// Runs `estimator` on `reps` resampled panels in parallel. Results depend
/// only on `seed`, never on scheduling.
pub fn bootstrap<F>(panel: &ProxyPanel, reps: usize, seed: u64, estimator: F) -> BootstrapDraws
where
    F: Fn(&ProxyPanel) -> Result<Vec<f64>> + Sync,
{
    let results: Vec<Option<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let rows = resample_rows(panel.n(), seed, b);
            estimator(&panel.select_rows(&rows))
                .ok()
                .filter(|v| v.iter().all(|x| x.is_finite()))
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    BootstrapDraws {
        estimates: results.into_iter().flatten().collect(),
        failed,
        requested: reps,
    }
}

impl BootstrapDraws {
    fn column(&self, t: usize) -> Vec<f64> {
        self.estimates.iter().map(|v| v[t]).collect()
    }

    /// Covariance of the replicates scaled by `n`, comparable with sandwich
    /// covariances of `sqrt(n)(theta_hat - theta)`.
    pub fn scaled_cov(&self, n: usize) -> Result<DMatrix<f64>> {
        let b = self.estimates.len();
        if b < 2 {
            return Err(MeError::Inference {
                msg: "fewer than two successful bootstrap replicates".into(),
                rank: 0,
                dim: self.estimates.first().map_or(0, Vec::len),
            });
        }
        let d = self.estimates[0].len();
        let mean: Vec<f64> = (0..d).map(|t| self.column(t).iter().sum::<f64>() / b as f64).collect();
        let mut cov = DMatrix::zeros(d, d);
        for v in &self.estimates {
            for r in 0..d {
                for c in 0..d {
                    cov[(r, c)] += (v[r] - mean[r]) * (v[c] - mean[c]);
                }
            }
        }
        Ok(cov * (n as f64 / (b - 1) as f64))
    }

    /// Bias-corrected percentile interval around `estimate`.
    pub fn bc_interval(&self, estimate: &[f64], level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let b = self.estimates.len();
        if b < 2 {
            return Err(MeError::Inference {
                msg: "fewer than two successful bootstrap replicates".into(),
                rank: 0,
                dim: estimate.len(),
            });
        }
        let std = Normal::standard();
        let za = std.inverse_cdf(0.5 - level / 2.0);
        let mut lo = Vec::with_capacity(estimate.len());
        let mut hi = Vec::with_capacity(estimate.len());
        for (t, &est) in estimate.iter().enumerate() {
            let mut col = self.column(t);
            col.sort_by(|a, c| a.total_cmp(c));
            let below = col.iter().filter(|&&v| v < est).count() as f64;
            let ties = col.iter().filter(|&&v| v == est).count() as f64;
            let bf = b as f64;
            let frac = ((below + 0.5 * ties) / bf).clamp(0.5 / bf, 1.0 - 0.5 / bf);
            let z0 = std.inverse_cdf(frac);
            lo.push(quantile(&col, std.cdf(2.0 * z0 + za)));
            hi.push(quantile(&col, std.cdf(2.0 * z0 - za)));
        }
        Ok((lo, hi))
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = prob.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.125), 1.5);
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 5.0);
    }

    #[test]
    fn symmetric_draws_give_percentile_interval() {
        let estimates: Vec<Vec<f64>> = (0..=1000).map(|i| vec![i as f64 / 1000.0 - 0.5]).collect();
        let d = BootstrapDraws {
            estimates,
            failed: 0,
            requested: 1001,
        };
        let (lo, hi) = d.bc_interval(&[0.0], 0.9).unwrap();
        assert!((lo[0] + 0.45).abs() < 2e-3 && (hi[0] - 0.45).abs() < 2e-3);
    }
}
