//! Outcome-model estimating functions and the shared Newton solver.
//!
//! Coefficients are laid out as `(intercept, x_1..x_p, z_1..z_q)` and every
//! family uses the score `(y - m(eta)) * w` with `w = (1, x, z)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MeError, Result};
use crate::linalg::{self, CompensatedSum};

/// Outcome family. `GammaLog` uses the quasi-score of a log-linear mean,
/// which needs no shape parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Linear,
    Logistic,
    GammaLog,
}

const EXP_CAP: f64 = 700.0;

pub fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl Family {
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Linear => eta,
            Family::Logistic => expit(eta),
            Family::GammaLog => eta.min(EXP_CAP).exp(),
        }
    }

    /// Derivative of the mean with respect to the linear predictor.
    pub fn dmean(self, eta: f64) -> f64 {
        match self {
            Family::Linear => 1.0,
            Family::Logistic => {
                let m = expit(eta);
                m * (1.0 - m)
            }
            Family::GammaLog => eta.min(EXP_CAP).exp(),
        }
    }

    /// Concave objective whose gradient is the score: Gaussian, Bernoulli
    /// and Poisson log-likelihood kernels respectively.
    fn objective(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::Linear => -0.5 * (y - eta) * (y - eta),
            Family::Logistic => {
                // y*eta - log(1 + e^eta), computed stably
                let soft = if eta > 0.0 {
                    eta + (-eta).exp().ln_1p()
                } else {
                    eta.exp().ln_1p()
                };
                y * eta - soft
            }
            Family::GammaLog => y * eta - eta.min(EXP_CAP).exp(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Family::Linear),
            "logistic" => Ok(Family::Logistic),
            "gamma-log" | "gamma" => Ok(Family::GammaLog),
            other => Err(MeError::Config(format!("unknown family '{other}'"))),
        }
    }
}

/// Response and design matrix `W = [1, X, Z]`.
#[derive(Debug, Clone)]
pub struct Design {
    pub y: Vec<f64>,
    pub w: DMatrix<f64>,
    pub p: usize,
}

impl Design {
    pub fn new(y: &[f64], x: &DMatrix<f64>, z: &DMatrix<f64>) -> Self {
        let n = y.len();
        let p = x.ncols();
        let q = z.ncols();
        let mut w = DMatrix::zeros(n, 1 + p + q);
        for i in 0..n {
            w[(i, 0)] = 1.0;
            for c in 0..p {
                w[(i, 1 + c)] = x[(i, c)];
            }
            for c in 0..q {
                w[(i, 1 + p + c)] = z[(i, c)];
            }
        }
        Design { y: y.to_vec(), w, p }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn eta(&self, i: usize, theta: &[f64]) -> f64 {
        let mut s = 0.0;
        for (c, t) in theta.iter().enumerate() {
            s += self.w[(i, c)] * t;
        }
        s
    }
}

/// Estimating function for one subject.
pub fn psi(family: Family, y: f64, w: &[f64], theta: &[f64]) -> DVector<f64> {
    let eta: f64 = w.iter().zip(theta).map(|(a, b)| a * b).sum();
    let r = y - family.mean(eta);
    DVector::from_iterator(w.len(), w.iter().map(|v| r * v))
}

/// Jacobian of [`psi`] with respect to `theta`: `-m'(eta) w w^T`.
pub fn psi_jacobian(family: Family, w: &[f64], theta: &[f64]) -> DMatrix<f64> {
    let eta: f64 = w.iter().zip(theta).map(|(a, b)| a * b).sum();
    let d = family.dmean(eta);
    let wv = DVector::from_column_slice(w);
    -(&wv * wv.transpose()) * d
}

/// Jacobian of [`psi`] with respect to the `p` error-prone covariates, which
/// occupy positions `1..=p` of `w`.
pub fn psi_dx(family: Family, y: f64, w: &[f64], theta: &[f64], p: usize) -> DMatrix<f64> {
    let eta: f64 = w.iter().zip(theta).map(|(a, b)| a * b).sum();
    let r = y - family.mean(eta);
    let d = family.dmean(eta);
    let mut out = DMatrix::zeros(w.len(), p);
    for c in 0..p {
        for a in 0..w.len() {
            out[(a, c)] = -d * theta[1 + c] * w[a];
        }
        out[(1 + c, c)] += r;
    }
    out
}

/// Root of the mean estimating equation.
#[derive(Debug, Clone)]
pub struct Root {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub score_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-9,
            max_iter: 100,
        }
    }
}

struct Eval {
    score: DVector<f64>,
    info: DMatrix<f64>,
    objective: f64,
    max_abs_eta: f64,
}

fn evaluate(family: Family, d: &Design, theta: &[f64]) -> Eval {
    let k = d.dim();
    let n = d.n() as f64;
    let mut score = vec![CompensatedSum::default(); k];
    let mut info = DMatrix::zeros(k, k);
    let mut obj = CompensatedSum::default();
    let mut max_abs_eta: f64 = 0.0;
    for i in 0..d.n() {
        let eta = d.eta(i, theta);
        max_abs_eta = max_abs_eta.max(eta.abs());
        let r = d.y[i] - family.mean(eta);
        let m1 = family.dmean(eta);
        obj.add(family.objective(d.y[i], eta));
        for a in 0..k {
            let wa = d.w[(i, a)];
            score[a].add(r * wa);
            for b in a..k {
                info[(a, b)] += m1 * wa * d.w[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    Eval {
        score: DVector::from_iterator(k, score.iter().map(|s| s.value() / n)),
        info: info / n,
        objective: obj.value() / n,
        max_abs_eta,
    }
}

/// Closed-form least squares via QR.
pub fn least_squares(d: &Design) -> Result<Vec<f64>> {
    let y = DVector::from_column_slice(&d.y);
    if linalg::rank(&d.w) < d.dim() {
        return Err(MeError::Estimation("design matrix is rank deficient".into()));
    }
    let qr = d.w.clone().qr();
    let qty = qr.q().transpose() * y;
    let r = qr.r();
    let sol = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| MeError::Estimation("singular least-squares system".into()))?;
    Ok(sol.iter().cloned().collect())
}

fn default_start(family: Family, d: &Design) -> Result<Vec<f64>> {
    let mut theta = vec![0.0; d.dim()];
    let ybar = d.y.iter().sum::<f64>() / d.n() as f64;
    match family {
        Family::Linear => return least_squares(d),
        Family::Logistic => {
            if ybar > 0.0 && ybar < 1.0 {
                theta[0] = (ybar / (1.0 - ybar)).ln();
            }
        }
        Family::GammaLog => {
            if ybar > 0.0 {
                theta[0] = ybar.ln();
            }
        }
    }
    Ok(theta)
}

/// Solves the mean estimating equation by Newton's method with step-halving
/// on the family's concave objective.
pub fn solve_m(
    family: Family,
    d: &Design,
    theta0: Option<&[f64]>,
    opts: SolverOptions,
) -> Result<Root> {
    if d.n() == 0 {
        return Err(MeError::Estimation("no observations".into()));
    }
    if family == Family::Logistic && d.y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(MeError::Config("logistic outcome must be 0/1".into()));
    }
    let mut theta = match theta0 {
        Some(t) => t.to_vec(),
        None => default_start(family, d)?,
    };
    // score tolerance scaled to the magnitude of the response
    let yscale = d.y.iter().map(|v| v.abs()).sum::<f64>() / d.n() as f64;
    let tol = opts.tol * yscale.max(1.0);
    let mut cur = evaluate(family, d, &theta);
    let mut eta_history: Vec<f64> = Vec::new();
    for it in 0..opts.max_iter {
        let norm = cur.score.amax();
        if norm <= tol {
            return Ok(Root {
                theta,
                iterations: it,
                score_norm: norm,
            });
        }
        if family == Family::Logistic {
            eta_history.push(cur.max_abs_eta);
            let len = eta_history.len();
            if len >= 4
                && cur.max_abs_eta > 30.0
                && eta_history[len - 4..].windows(2).all(|w| w[1] > w[0])
            {
                return Err(MeError::Separation);
            }
        }
        let step = linalg::solve(&cur.info, &cur.score).ok_or_else(|| {
            MeError::Estimation(format!(
                "singular information matrix (rank {} of {})",
                linalg::rank(&cur.info),
                d.dim()
            ))
        })?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let next = evaluate(family, d, &cand);
            if next.objective.is_finite() && next.objective >= cur.objective - 1e-15 * cur.objective.abs() {
                accepted = Some((cand, next));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, next)) => {
                let moved = cand
                    .iter()
                    .zip(&theta)
                    .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
                    .fold(0.0, f64::max);
                theta = cand;
                cur = next;
                if moved < 1e-15 && cur.score.amax() <= tol * 1e3 {
                    return Ok(Root {
                        theta,
                        iterations: it + 1,
                        score_norm: cur.score.amax(),
                    });
                }
            }
            None => {
                let norm = cur.score.amax();
                if norm <= tol * 1e3 {
                    return Ok(Root {
                        theta,
                        iterations: it + 1,
                        score_norm: norm,
                    });
                }
                return Err(MeError::NonConvergence {
                    iterations: it + 1,
                    score_norm: norm,
                    last: theta,
                });
            }
        }
    }
    let norm = cur.score.amax();
    if norm <= tol {
        return Ok(Root {
            theta,
            iterations: opts.max_iter,
            score_norm: norm,
        });
    }
    if family == Family::Logistic && cur.max_abs_eta > 30.0 {
        return Err(MeError::Separation);
    }
    Err(MeError::NonConvergence {
        iterations: opts.max_iter,
        score_norm: norm,
        last: theta,
    })
}

/// Model-based sandwich for a fit with known covariates: `A^{-1} B A^{-T}`.
pub fn plain_sandwich(family: Family, d: &Design, theta: &[f64]) -> Result<DMatrix<f64>> {
    let k = d.dim();
    let n = d.n() as f64;
    let mut a = DMatrix::zeros(k, k);
    let mut b = DMatrix::zeros(k, k);
    for i in 0..d.n() {
        let w: Vec<f64> = (0..k).map(|c| d.w[(i, c)]).collect();
        let s = psi(family, d.y[i], &w, theta);
        b += &s * s.transpose();
        a += psi_jacobian(family, &w, theta);
    }
    a /= n;
    b /= n;
    let ainv = linalg::inverse_or_rank(&a, "outcome Jacobian")?;
    Ok(linalg::symmetrize(&(&ainv * b * ainv.transpose())))
}

/// How a covariance was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovKind {
    Sandwich,
    Bootstrap,
    None,
}

/// Bootstrap percentile interval attached to a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interval {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub replicates: usize,
    pub failed: usize,
}

/// Estimates with the covariance of `sqrt(n) (theta_hat - theta)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: String,
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    pub n: usize,
    pub cov: Option<Vec<Vec<f64>>>,
    pub cov_kind: CovKind,
    pub iterations: usize,
    pub score_norm: f64,
    pub interval: Option<Interval>,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl FitResult {
    pub fn new(method: &str, root: Root, n: usize, p: usize, q: usize) -> Self {
        FitResult {
            method: method.to_string(),
            names: coefficient_names(p, q),
            theta: root.theta,
            n,
            cov: None,
            cov_kind: CovKind::None,
            iterations: root.iterations,
            score_norm: root.score_norm,
            interval: None,
            flags: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn with_cov(mut self, cov: &DMatrix<f64>, kind: CovKind) -> Self {
        self.cov = Some(
            (0..cov.nrows())
                .map(|r| (0..cov.ncols()).map(|c| cov[(r, c)]).collect())
                .collect(),
        );
        self.cov_kind = kind;
        self
    }

    pub fn cov_matrix(&self) -> Option<DMatrix<f64>> {
        self.cov.as_ref().map(|rows| {
            let d = rows.len();
            DMatrix::from_fn(d, d, |r, c| rows[r][c])
        })
    }

    /// Standard errors of the estimates, `sqrt(diag(cov) / n)`.
    pub fn se(&self) -> Option<Vec<f64>> {
        self.cov.as_ref().map(|rows| {
            rows.iter()
                .enumerate()
                .map(|(i, r)| (r[i].max(0.0) / self.n as f64).sqrt())
                .collect()
        })
    }

    /// Normal-theory interval at the given two-sided level.
    pub fn normal_interval(&self, level: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        use statrs::distribution::{ContinuousCDF, Normal};
        let se = self.se()?;
        let zq = Normal::standard().inverse_cdf(0.5 + level / 2.0);
        let lo = self.theta.iter().zip(&se).map(|(t, s)| t - zq * s).collect();
        let hi = self.theta.iter().zip(&se).map(|(t, s)| t + zq * s).collect();
        Some((lo, hi))
    }
}

pub fn coefficient_names(p: usize, q: usize) -> Vec<String> {
    let mut names = vec!["intercept".to_string()];
    names.extend((1..=p).map(|c| format!("x{c}")));
    names.extend((1..=q).map(|c| format!("z{c}")));
    names
}

/// Fits the model with known covariates `x` and returns estimates with a
/// model-based sandwich covariance.
pub fn fit_known(
    family: Family,
    y: &[f64],
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    method: &str,
) -> Result<FitResult> {
    let d = Design::new(y, x, z);
    let root = solve_m(family, &d, None, SolverOptions::default())?;
    let cov = plain_sandwich(family, &d, &root.theta)?;
    Ok(FitResult::new(method, root, y.len(), x.ncols(), z.ncols()).with_cov(&cov, CovKind::Sandwich))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_score_vanishes_at_mean_response() {
        let r = psi(Family::Logistic, 0.5, &[1.0, 1.0], &[0.5, -0.5]);
        assert_eq!(r.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn noiseless_linear_is_recovered() {
        let n = 50;
        let x = DMatrix::from_fn(n, 3, |i, c| ((i * (c + 3)) % 7) as f64 + 0.1 * c as f64 + (i as f64).sin());
        let theta = [2.0, -1.0, 2.0, 0.5];
        let y: Vec<f64> = (0..n)
            .map(|i| theta[0] + theta[1] * x[(i, 0)] + theta[2] * x[(i, 1)] + theta[3] * x[(i, 2)])
            .collect();
        let d = Design::new(&y, &x, &DMatrix::zeros(n, 0));
        let root = solve_m(Family::Linear, &d, None, SolverOptions::default()).unwrap();
        for (a, b) in root.theta.iter().zip(theta) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn separable_logistic_is_detected() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let d = Design::new(&y, &x, &DMatrix::zeros(6, 0));
        let err = solve_m(Family::Logistic, &d, None, SolverOptions::default()).unwrap_err();
        assert!(matches!(err, MeError::Separation), "{err:?}");
    }

    #[test]
    fn psi_dx_matches_finite_difference() {
        for fam in [Family::Linear, Family::Logistic, Family::GammaLog] {
            let w = [1.0, 0.3, -0.7, 1.2];
            let theta = [0.2, 0.5, -0.4, 0.1];
            let y = 0.8;
            let an = psi_dx(fam, y, &w, &theta, 2);
            for c in 0..2 {
                let h = 1e-6;
                let mut up = w;
                up[1 + c] += h;
                let mut dn = w;
                dn[1 + c] -= h;
                let fd = (psi(fam, y, &up, &theta) - psi(fam, y, &dn, &theta)) / (2.0 * h);
                for a in 0..4 {
                    assert!((fd[a] - an[(a, c)]).abs() < 1e-7);
                }
            }
        }
    }
}
