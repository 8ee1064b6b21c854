//! Simulation extrapolation for proxies that need not be identically
//! distributed.
//!
//! Pseudo-data `eta1^{-1} o (x* - eta0 + sqrt(lambda) M^{1/2} nu)` carry error
//! covariance `(1 + lambda)` times that of the corrected proxy, so the naive
//! fit traced over a lambda grid can be extrapolated back to `lambda = -1`.
//! Estimates are either computed per proxy and then averaged
//! ([`SimexMode::AverageEstimates`]) or computed once on the weighted proxy
//! average of each missingness pattern ([`SimexMode::AverageProxies`]).

mod extrapolant;

pub use extrapolant::{fit_extrapolant, Extrapolant, ExtrapolantFit};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bootstrap;
use crate::calibration::{self, project_simplex};
use crate::correction::Xi;
use crate::data::{ErrorModelSpec, Pattern, ProxyPanel};
use crate::error::{MeError, Result};
use crate::linalg;
use crate::outcome::{self, CovKind, Design, Family, FitResult, Interval, Root, SolverOptions};
use crate::rng;
use crate::stacked::StackedSystem;

/// How estimates from several proxies are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimexMode {
    /// Simulate on the weighted proxy average of each missingness pattern.
    AverageProxies,
    /// Simulate on each proxy separately and average the extrapolated
    /// estimates.
    AverageEstimates,
}

impl SimexMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "proxies" | "average-proxies" => Ok(SimexMode::AverageProxies),
            "estimates" | "average-estimates" => Ok(SimexMode::AverageEstimates),
            other => Err(MeError::Config(format!("unknown SIMEX mode '{other}'"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            SimexMode::AverageProxies => "proxies",
            SimexMode::AverageEstimates => "estimates",
        }
    }
}

/// Extrapolant selection, per coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtrapolantChoice {
    /// Linear where the curve is flat within Monte Carlo error. Otherwise
    /// nonlinear for the intercept and the error-prone slopes, whose
    /// attenuation is rational in lambda, and quadratic for the rest.
    Auto,
    All(Extrapolant),
    PerCoefficient(Vec<Extrapolant>),
}

impl ExtrapolantChoice {
    /// `auto`, a single family name, or a comma-separated list with one
    /// family per coefficient.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(ExtrapolantChoice::Auto);
        }
        let parts = s.split(',').map(|t| Extrapolant::parse(t.trim())).collect::<Result<Vec<_>>>()?;
        match parts.as_slice() {
            [one] => Ok(ExtrapolantChoice::All(*one)),
            _ => Ok(ExtrapolantChoice::PerCoefficient(parts)),
        }
    }

    fn min_points(&self) -> usize {
        match self {
            ExtrapolantChoice::Auto => 3,
            ExtrapolantChoice::All(f) => f.n_params(),
            ExtrapolantChoice::PerCoefficient(v) => v.iter().map(|f| f.n_params()).max().unwrap_or(2),
        }
    }
}

/// Weights for pooling per-proxy estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineRule {
    Equal,
    Fixed(Vec<f64>),
    /// Minimum-variance weights on the simplex, per coefficient.
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimexConfig {
    pub lambdas: Vec<f64>,
    pub b_reps: usize,
    pub extrapolant: ExtrapolantChoice,
    pub mode: SimexMode,
    /// Proxy weights for the averaged proxy; `None` means equal.
    pub alpha: Option<Vec<f64>>,
    pub combine: CombineRule,
    pub seed: u64,
}

impl Default for SimexConfig {
    fn default() -> Self {
        SimexConfig {
            lambdas: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            b_reps: 100,
            extrapolant: ExtrapolantChoice::Auto,
            mode: SimexMode::AverageProxies,
            alpha: None,
            combine: CombineRule::Equal,
            seed: 0,
        }
    }
}

impl SimexConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let l = &self.lambdas;
        if l.first() != Some(&0.0) {
            return Err(MeError::Precondition("lambda grid must start at 0".into()));
        }
        if l.iter().any(|v| !v.is_finite()) || l.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MeError::Precondition("lambda grid must be finite and strictly increasing".into()));
        }
        let need = self.extrapolant.min_points();
        if l.len() < need {
            return Err(MeError::Precondition(format!(
                "extrapolant needs at least {need} grid points, got {}",
                l.len()
            )));
        }
        if self.b_reps == 0 {
            return Err(MeError::Precondition("B must be at least 1".into()));
        }
        if let Some(a) = &self.alpha {
            if a.len() != k || a.iter().any(|v| !v.is_finite() || *v < 0.0) || a.iter().sum::<f64>() <= 0.0 {
                return Err(MeError::Config(format!("alpha must be {k} nonnegative weights with positive sum")));
            }
        }
        if let CombineRule::Fixed(w) = &self.combine {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(MeError::Config("combine weights must be nonnegative with positive sum".into()));
            }
        }
        Ok(())
    }

    fn proxy_weights(&self, k: usize) -> Vec<f64> {
        match &self.alpha {
            Some(a) => {
                let s: f64 = a.iter().sum();
                a.iter().map(|v| v / s).collect()
            }
            None => vec![1.0 / k as f64; k],
        }
    }
}

/// A single pseudo-proxy: `eta1^{-1} o (x - eta0 + sqrt(lambda) R noise)`
/// where `R` is the symmetric square root of the error covariance.
pub fn pseudo_proxy(
    x: &DVector<f64>,
    eta0: &DVector<f64>,
    eta1: &DVector<f64>,
    m_root: &DMatrix<f64>,
    lambda: f64,
    noise: &DVector<f64>,
) -> DVector<f64> {
    (x - eta0 + m_root * noise * lambda.sqrt()).component_div(eta1)
}

/// Subjects simulated together, with the working proxy and the error model
/// it is corrected with.
#[derive(Debug, Clone)]
struct Unit {
    label: String,
    tag: u64,
    rows: Vec<usize>,
    /// Contribution of each proxy to the working proxy; empty for the
    /// replicate-mean baseline, which does not depend on the correction
    /// parameters.
    weights: Vec<f64>,
    x: DMatrix<f64>,
    eta0: DVector<f64>,
    eta1: DVector<f64>,
    m: DMatrix<f64>,
    root: DMatrix<f64>,
    /// Per-subject multiplier on the added noise.
    scale: Vec<f64>,
}

/// Drops eigenvalues of an error covariance that are rounding noise relative
/// to `reference`, so error-free proxies get no pseudo-noise at all.
fn denoise(m: &DMatrix<f64>, reference: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(linalg::symmetrize(m));
    let tol = 1e-12 * reference.abs().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().all(|&v| v > tol) {
        return linalg::symmetrize(m);
    }
    let vals = eig.eigenvalues.map(|v| if v > tol { v } else { 0.0 });
    linalg::symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

#[allow(clippy::too_many_arguments)]
fn make_unit(
    label: String,
    tag: u64,
    rows: Vec<usize>,
    weights: Vec<f64>,
    x: DMatrix<f64>,
    eta: (DVector<f64>, DVector<f64>),
    m: DMatrix<f64>,
    reference: f64,
    scale: Vec<f64>,
) -> Unit {
    let m = denoise(&m, reference);
    let root = linalg::sym_sqrt(&m);
    Unit {
        label,
        tag,
        rows,
        weights,
        x,
        eta0: eta.0,
        eta1: eta.1,
        m,
        root,
        scale,
    }
}

fn generalized_units(panel: &ProxyPanel, xi: &Xi, cfg: &SimexConfig) -> Vec<Unit> {
    let (k, p) = (panel.k(), panel.p());
    let par = &xi.params;
    let reference = |m: &DMatrix<f64>| m.trace() + par.sigma_xx.trace();
    match cfg.mode {
        SimexMode::AverageEstimates => (0..k)
            .map(|j| {
                let rows: Vec<usize> = (0..panel.n()).filter(|&i| panel.observed(i, j)).collect();
                let x = DMatrix::from_fn(rows.len(), p, |r, c| panel.value(rows[r], j, c));
                let mut w = vec![0.0; k];
                w[j] = 1.0;
                let scale = vec![1.0; rows.len()];
                make_unit(
                    format!("proxy{}", j + 1),
                    (1u64 << 32) + j as u64,
                    rows,
                    w,
                    x,
                    (par.eta0[j].clone(), par.eta1[j].clone()),
                    par.m[j].clone(),
                    reference(&par.m[j]),
                    scale,
                )
            })
            .collect(),
        SimexMode::AverageProxies => {
            let alpha = cfg.proxy_weights(k);
            panel
                .patterns()
                .into_iter()
                .map(|g| {
                    let w = calibration::pattern_weights(&alpha, g.pattern);
                    let mut eta0 = DVector::zeros(p);
                    let mut eta1 = DVector::zeros(p);
                    let mut m = DMatrix::zeros(p, p);
                    for j in 0..k {
                        if w[j] > 0.0 {
                            eta0 += &par.eta0[j] * w[j];
                            eta1 += &par.eta1[j] * w[j];
                            m += &par.m[j] * (w[j] * w[j]);
                        }
                    }
                    let x = DMatrix::from_fn(g.rows.len(), p, |r, c| {
                        (0..k)
                            .filter(|&j| w[j] > 0.0)
                            .map(|j| w[j] * panel.value(g.rows[r], j, c))
                            .sum()
                    });
                    let label = g
                        .pattern
                        .members(k)
                        .iter()
                        .map(|j| (j + 1).to_string())
                        .collect::<Vec<_>>()
                        .join("+");
                    let scale = vec![1.0; g.rows.len()];
                    let r = reference(&m);
                    make_unit(format!("pattern{label}"), g.pattern.0 as u64, g.rows, w, x, (eta0, eta1), m, r, scale)
                })
                .collect()
        }
    }
}

/// Curve of averaged naive estimates over the lambda grid for one unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimexCurve {
    pub label: String,
    /// Subjects in the unit.
    pub n: usize,
    pub lambdas: Vec<f64>,
    /// `estimates[r]` is the coefficient vector at `lambdas[r]`.
    pub estimates: Vec<Vec<f64>>,
    /// Monte Carlo standard errors `sd_b / sqrt(B)`; zero at `lambda = 0`.
    pub mc_se: Vec<Vec<f64>>,
    /// Grid points removed because too many pseudo-data fits failed.
    pub dropped: Vec<f64>,
    pub failed_fits: usize,
    /// Replicates whose fit succeeded at each kept grid point.
    #[serde(skip)]
    successes: Vec<Vec<usize>>,
}

impl SimexCurve {
    /// A curve from externally computed points, for diagnostics and plots.
    pub fn from_points(label: &str, lambdas: Vec<f64>, estimates: Vec<Vec<f64>>, mc_se: Vec<Vec<f64>>) -> Self {
        SimexCurve {
            label: label.to_string(),
            n: 0,
            lambdas,
            estimates,
            mc_se,
            dropped: Vec::new(),
            failed_fits: 0,
            successes: Vec::new(),
        }
    }
}

fn noise(seed: u64, tag: u64, b: usize, n: usize, p: usize) -> DMatrix<f64> {
    let mut r = rng::stream(seed, &[tag, b as u64]);
    let v: Vec<f64> = (0..n * p).map(|_| StandardNormal.sample(&mut r)).collect();
    DMatrix::from_row_slice(n, p, &v)
}

/// Pseudo-proxies of a unit at `lambda` for noise matrix `nu` (rows are
/// subjects); `None` means no noise.
fn pseudo_data(unit: &Unit, lambda: f64, nu: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let (n, p) = (unit.x.nrows(), unit.x.ncols());
    let added = nu.map(|nu| nu * &unit.root);
    let sl = lambda.sqrt();
    DMatrix::from_fn(n, p, |i, c| {
        let extra = added.as_ref().map_or(0.0, |a| sl * unit.scale[i] * a[(i, c)]);
        (unit.x[(i, c)] - unit.eta0[c] + extra) / unit.eta1[c]
    })
}

/// Fraction of failed pseudo-data fits above which a grid point is dropped.
const MAX_FAILED: f64 = 0.1;

fn simulate_unit(family: Family, y: &[f64], z: &DMatrix<f64>, unit: &Unit, cfg: &SimexConfig) -> Result<SimexCurve> {
    let (n, p) = (unit.x.nrows(), unit.x.ncols());
    let opts = SolverOptions::default();
    let base = outcome::solve_m(family, &Design::new(y, &pseudo_data(unit, 0.0, None), z), None, opts)?;
    let start = base.theta.clone();
    let positive: Vec<f64> = cfg.lambdas.iter().cloned().filter(|&l| l > 0.0).collect();
    let b_reps = cfg.b_reps;
    let fits: Vec<Vec<Option<Vec<f64>>>> = (0..b_reps)
        .into_par_iter()
        .map(|b| {
            let nu = noise(cfg.seed, unit.tag, b, n, p);
            positive
                .iter()
                .map(|&l| {
                    let x = pseudo_data(unit, l, Some(&nu));
                    outcome::solve_m(family, &Design::new(y, &x, z), Some(&start), opts)
                        .ok()
                        .map(|r| r.theta)
                })
                .collect()
        })
        .collect();
    let d = start.len();
    let mut curve = SimexCurve {
        label: unit.label.clone(),
        n,
        lambdas: vec![0.0],
        estimates: vec![base.theta],
        mc_se: vec![vec![0.0; d]],
        dropped: Vec::new(),
        failed_fits: 0,
        successes: vec![vec![0]],
    };
    for (r, &l) in positive.iter().enumerate() {
        let ok: Vec<usize> = (0..b_reps).filter(|&b| fits[b][r].is_some()).collect();
        let failed = b_reps - ok.len();
        curve.failed_fits += failed;
        if ok.is_empty() || failed as f64 > MAX_FAILED * b_reps as f64 {
            curve.dropped.push(l);
            continue;
        }
        let m = ok.len() as f64;
        let mut mean = vec![0.0; d];
        for &b in &ok {
            for (t, v) in fits[b][r].as_ref().expect("filtered").iter().enumerate() {
                mean[t] += v / m;
            }
        }
        let se = (0..d)
            .map(|t| {
                if ok.len() < 2 {
                    return 0.0;
                }
                let ss: f64 = ok
                    .iter()
                    .map(|&b| {
                        let e = fits[b][r].as_ref().expect("filtered")[t] - mean[t];
                        e * e
                    })
                    .sum();
                (ss / (m - 1.0)).sqrt() / m.sqrt()
            })
            .collect();
        curve.lambdas.push(l);
        curve.estimates.push(mean);
        curve.mc_se.push(se);
        curve.successes.push(ok);
    }
    if curve.lambdas.len() < 2 {
        return Err(MeError::Estimation(format!(
            "SIMEX curve for {} has no usable positive grid point",
            unit.label
        )));
    }
    Ok(curve)
}

/// Weighted least-squares slope of a lambda curve, weights `1 / se^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flatness {
    pub slope: f64,
    pub se: f64,
    pub flat: bool,
}

/// Slope test for one coefficient's curve: flat when the slope is within
/// two standard errors of zero. Standard errors are floored at `1e-8` of
/// the curve's magnitude so that noise-free points do not get infinite
/// weight.
pub fn curve_flatness(lambdas: &[f64], values: &[f64], mc_se: &[f64]) -> Result<Flatness> {
    if lambdas.len() < 2 || values.len() != lambdas.len() || mc_se.len() != lambdas.len() {
        return Err(MeError::Precondition("flatness needs at least two grid points".into()));
    }
    let level = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let floor = 1e-8 * (1.0 + level);
    let w: Vec<f64> = mc_se.iter().map(|s| 1.0 / s.max(floor).powi(2)).collect();
    let sw: f64 = w.iter().sum();
    let lbar = w.iter().zip(lambdas).map(|(a, l)| a * l).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(lambdas).map(|(a, l)| a * (l - lbar).powi(2)).sum();
    let sxy: f64 = w
        .iter()
        .zip(lambdas)
        .zip(values)
        .map(|((a, l), v)| a * (l - lbar) * v)
        .sum();
    let slope = sxy / sxx;
    let se = 1.0 / sxx.sqrt();
    Ok(Flatness {
        slope,
        se,
        flat: slope.abs() <= 2.0 * se,
    })
}

/// Extrapolant fits for every coefficient of a curve, with flags for
/// nonlinear fits that had to be downgraded.
fn extrapolate_curve(
    curve: &SimexCurve,
    choice: &ExtrapolantChoice,
    names: &[String],
    p: usize,
) -> Result<(Vec<f64>, Vec<ExtrapolantFit>, Vec<String>)> {
    let d = names.len();
    if let ExtrapolantChoice::PerCoefficient(v) = choice {
        if v.len() != d {
            return Err(MeError::Config(format!("{} extrapolants given for {d} coefficients", v.len())));
        }
    }
    let mut est = Vec::with_capacity(d);
    let mut fits = Vec::with_capacity(d);
    let mut flags = Vec::new();
    for t in 0..d {
        let values: Vec<f64> = curve.estimates.iter().map(|e| e[t]).collect();
        let se: Vec<f64> = curve.mc_se.iter().map(|e| e[t]).collect();
        let family = match choice {
            ExtrapolantChoice::All(f) => *f,
            ExtrapolantChoice::PerCoefficient(v) => v[t],
            ExtrapolantChoice::Auto => {
                if curve_flatness(&curve.lambdas, &values, &se)?.flat {
                    Extrapolant::Linear
                } else if t <= p {
                    Extrapolant::Nonlinear
                } else {
                    Extrapolant::Quadratic
                }
            }
        };
        let fit = match family {
            Extrapolant::Nonlinear => {
                let nl = fit_extrapolant(&curve.lambdas, &values, Extrapolant::Nonlinear)
                    .ok()
                    // a pole far beyond the grid leaves the fit locally unidentified
                    .filter(|f| f.gamma[2] > 1.0 + 1e-6 && f.influence().is_ok());
                match nl {
                    Some(f) => f,
                    None => {
                        let flag = format!("{}:{}:nonlinear-downgraded-to-quadratic", curve.label, names[t]);
                        let mut f = fit_extrapolant(&curve.lambdas, &values, Extrapolant::Quadratic)?;
                        f.flags.push(flag.clone());
                        flags.push(flag);
                        f
                    }
                }
            }
            other => fit_extrapolant(&curve.lambdas, &values, other)?,
        };
        est.push(fit.extrapolate()?);
        fits.push(fit);
    }
    Ok((est, fits, flags))
}

/// Weight on the first of two estimates minimising the variance of the
/// combination, `(v2 - c) / (v1 + v2 - 2c)`, clipped to `[0, 1]`.
pub fn optimal_pair_weight(v1: f64, v2: f64, c: f64) -> f64 {
    let den = v1 + v2 - 2.0 * c;
    if den <= f64::EPSILON * (v1.abs() + v2.abs()).max(f64::MIN_POSITIVE) {
        return 0.5;
    }
    ((v2 - c) / den).clamp(0.0, 1.0)
}

/// Minimiser of `w' V w` over the probability simplex.
pub fn min_variance_weights(v: &DMatrix<f64>) -> Vec<f64> {
    let k = v.nrows();
    match k {
        0 => Vec::new(),
        1 => vec![1.0],
        2 => {
            let a = optimal_pair_weight(v[(0, 0)], v[(1, 1)], v[(0, 1)]);
            vec![a, 1.0 - a]
        }
        _ => {
            let vs = linalg::symmetrize(v);
            let lmax = SymmetricEigen::new(vs.clone()).eigenvalues.amax();
            if lmax <= 0.0 {
                return vec![1.0 / k as f64; k];
            }
            let step = 1.0 / (2.0 * lmax);
            let mut w = DVector::from_element(k, 1.0 / k as f64);
            for _ in 0..20_000 {
                let grad = &vs * &w * 2.0;
                let cand: Vec<f64> = (0..k).map(|j| w[j] - step * grad[j]).collect();
                let next = DVector::from_vec(project_simplex(&cand));
                let moved = (&next - &w).amax();
                w = next;
                if moved < 1e-15 {
                    break;
                }
            }
            w.iter().cloned().collect()
        }
    }
}

/// Pooled estimate from per-unit estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Combined {
    pub theta: Vec<f64>,
    /// `weights[u][t]`: weight of unit `u` on coefficient `t`.
    pub weights: Vec<Vec<f64>>,
    pub flags: Vec<String>,
}

/// Averages per-unit estimates coefficient by coefficient. `cov` is the
/// joint covariance of the stacked unit estimates (unit-major), needed only
/// for [`CombineRule::Optimal`]; without it the rule falls back to equal
/// weights.
pub fn combine_estimates(estimates: &[Vec<f64>], cov: Option<&DMatrix<f64>>, rule: &CombineRule) -> Result<Combined> {
    let u = estimates.len();
    if u == 0 {
        return Err(MeError::Estimation("no estimates to combine".into()));
    }
    let d = estimates[0].len();
    let mut flags = Vec::new();
    let per_coef: Vec<Vec<f64>> = match rule {
        CombineRule::Equal => vec![vec![1.0 / u as f64; u]; d],
        CombineRule::Fixed(w) => {
            if w.len() != u {
                return Err(MeError::Config(format!("{} combine weights for {u} estimates", w.len())));
            }
            let s: f64 = w.iter().sum();
            vec![w.iter().map(|v| v / s).collect(); d]
        }
        CombineRule::Optimal => match cov {
            Some(c) if c.nrows() == u * d => (0..d)
                .map(|t| min_variance_weights(&DMatrix::from_fn(u, u, |a, b| c[(a * d + t, b * d + t)])))
                .collect(),
            _ => {
                flags.push("combine-weights-fell-back-to-equal".to_string());
                vec![vec![1.0 / u as f64; u]; d]
            }
        },
    };
    let weights: Vec<Vec<f64>> = (0..u).map(|a| (0..d).map(|t| per_coef[t][a]).collect()).collect();
    let theta = (0..d)
        .map(|t| (0..u).map(|a| weights[a][t] * estimates[a][t]).sum())
        .collect();
    Ok(Combined { theta, weights, flags })
}

/// Generalised SIMEX fit with the pieces its sandwich needs.
#[derive(Debug, Clone)]
pub struct SimexFit {
    pub fit: FitResult,
    pub mode: SimexMode,
    pub curves: Vec<SimexCurve>,
    /// `extrapolants[u][t]`.
    pub extrapolants: Vec<Vec<ExtrapolantFit>>,
    pub unit_estimates: Vec<Vec<f64>>,
    /// `weights[u][t]` used to pool the unit estimates.
    pub weights: Vec<Vec<f64>>,
    pub family: Family,
    units: Vec<Unit>,
}

impl SimexFit {
    /// Rows `unit, coefficient, lambda, estimate, mc_se` of every curve.
    pub fn curve_rows(&self) -> Vec<(String, String, f64, f64, f64)> {
        let mut out = Vec::new();
        for c in &self.curves {
            for (r, &l) in c.lambdas.iter().enumerate() {
                for (t, name) in self.fit.names.iter().enumerate() {
                    out.push((c.label.clone(), name.clone(), l, c.estimates[r][t], c.mc_se[r][t]));
                }
            }
        }
        out
    }
}

struct UnitRun {
    unit: Unit,
    curve: SimexCurve,
    estimate: Vec<f64>,
    fits: Vec<ExtrapolantFit>,
}

fn run_units(panel: &ProxyPanel, family: Family, units: Vec<Unit>, cfg: &SimexConfig) -> Result<(Vec<UnitRun>, Vec<String>)> {
    let names = outcome::coefficient_names(panel.p(), panel.q());
    let min_rows = 2 * names.len() + 2;
    let mut runs = Vec::new();
    let mut flags = Vec::new();
    for unit in units {
        if unit.rows.len() < min_rows {
            flags.push(format!("{}:dropped-too-few-subjects", unit.label));
            continue;
        }
        let y: Vec<f64> = unit.rows.iter().map(|&i| panel.y()[i]).collect();
        let z = panel.z().select_rows(&unit.rows);
        let attempt = simulate_unit(family, &y, &z, &unit, cfg)
            .and_then(|curve| extrapolate_curve(&curve, &cfg.extrapolant, &names, panel.p()).map(|e| (curve, e)));
        match attempt {
            Ok((curve, (estimate, fits, f))) => {
                flags.extend(f);
                if !curve.dropped.is_empty() {
                    flags.push(format!("{}:dropped-grid-points:{:?}", unit.label, curve.dropped));
                }
                runs.push(UnitRun { unit, curve, estimate, fits });
            }
            Err(e) if !e.is_config() => flags.push(format!("{}:dropped:{e}", unit.label)),
            Err(e) => return Err(e),
        }
    }
    if runs.is_empty() {
        return Err(MeError::Estimation("no SIMEX unit could be fitted".into()));
    }
    Ok((runs, flags))
}

/// Inverse-variance weights per coefficient across pattern groups, using
/// the model-based variance of the uncorrected fit in each group.
fn group_weights(panel: &ProxyPanel, family: Family, runs: &[UnitRun]) -> (Vec<Vec<f64>>, Vec<String>) {
    let d = runs[0].estimate.len();
    if runs.len() == 1 {
        return (vec![vec![1.0; d]], Vec::new());
    }
    let vars: Option<Vec<Vec<f64>>> = runs
        .iter()
        .map(|r| {
            let y: Vec<f64> = r.unit.rows.iter().map(|&i| panel.y()[i]).collect();
            let z = panel.z().select_rows(&r.unit.rows);
            let design = Design::new(&y, &pseudo_data(&r.unit, 0.0, None), &z);
            let cov = outcome::plain_sandwich(family, &design, &r.curve.estimates[0]).ok()?;
            let n = r.unit.rows.len() as f64;
            let v: Vec<f64> = (0..d).map(|t| cov[(t, t)] / n).collect();
            v.iter().all(|x| x.is_finite() && *x > 0.0).then_some(v)
        })
        .collect();
    match vars {
        Some(v) => {
            let mut w = vec![vec![0.0; d]; runs.len()];
            for t in 0..d {
                let total: f64 = v.iter().map(|vu| 1.0 / vu[t]).sum();
                for (u, vu) in v.iter().enumerate() {
                    w[u][t] = 1.0 / vu[t] / total;
                }
            }
            (w, Vec::new())
        }
        None => {
            let total: f64 = runs.iter().map(|r| r.unit.rows.len() as f64).sum();
            let w = runs
                .iter()
                .map(|r| vec![r.unit.rows.len() as f64 / total; d])
                .collect();
            (w, vec!["group-weights-by-size".to_string()])
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    panel: &ProxyPanel,
    family: Family,
    method: &str,
    mode: SimexMode,
    runs: Vec<UnitRun>,
    weights: Vec<Vec<f64>>,
    flags: Vec<String>,
    config: serde_json::Value,
) -> SimexFit {
    let d = runs[0].estimate.len();
    let theta = (0..d)
        .map(|t| runs.iter().zip(&weights).map(|(r, w)| w[t] * r.estimate[t]).sum())
        .collect();
    let root = Root {
        theta,
        iterations: 0,
        score_norm: 0.0,
    };
    let mut fit = FitResult::new(method, root, panel.n(), panel.p(), panel.q());
    fit.flags = flags;
    fit.config = config;
    let mut out = SimexFit {
        fit,
        mode,
        curves: Vec::new(),
        extrapolants: Vec::new(),
        unit_estimates: Vec::new(),
        weights,
        family,
        units: Vec::new(),
    };
    for r in runs {
        out.curves.push(r.curve);
        out.extrapolants.push(r.fits);
        out.unit_estimates.push(r.estimate);
        out.units.push(r.unit);
    }
    out
}

fn config_json(cfg: &SimexConfig, k: usize) -> serde_json::Value {
    json!({
        "mode": cfg.mode.tag(),
        "lambdas": cfg.lambdas,
        "b_reps": cfg.b_reps,
        "extrapolant": cfg.extrapolant,
        "alpha": cfg.proxy_weights(k),
        "combine": cfg.combine,
        "seed": cfg.seed,
    })
}

/// Generalised SIMEX point estimate. Optimal pooling across proxies uses
/// the sandwich covariance of the per-proxy estimates.
pub fn fit_simex(panel: &ProxyPanel, family: Family, xi: &Xi, cfg: &SimexConfig) -> Result<SimexFit> {
    cfg.validate(panel.k())?;
    let units = generalized_units(panel, xi, cfg);
    let (runs, mut flags) = run_units(panel, family, units, cfg)?;
    let method = format!("gen-simex-{}", cfg.mode.tag());
    let config = config_json(cfg, panel.k());
    match cfg.mode {
        SimexMode::AverageProxies => {
            let (w, f) = group_weights(panel, family, &runs);
            flags.extend(f);
            Ok(assemble(panel, family, &method, cfg.mode, runs, w, flags, config))
        }
        SimexMode::AverageEstimates => {
            let u = runs.len();
            let d = runs[0].estimate.len();
            let provisional = vec![vec![1.0 / u as f64; d]; u];
            let mut sf = assemble(panel, family, &method, cfg.mode, runs, provisional, Vec::new(), config);
            let cov = if cfg.combine == CombineRule::Optimal {
                unit_covariance(panel, xi, &sf, cfg).ok()
            } else {
                None
            };
            let rule = match (&cfg.combine, u == panel.k()) {
                (CombineRule::Fixed(_), false) => {
                    flags.push("fixed-combine-weights-ignored-after-dropped-proxy".into());
                    CombineRule::Equal
                }
                (r, _) => r.clone(),
            };
            let comb = combine_estimates(&sf.unit_estimates, cov.as_ref(), &rule)?;
            flags.extend(comb.flags);
            sf.fit.theta = comb.theta;
            sf.weights = comb.weights;
            sf.fit.flags = flags;
            Ok(sf)
        }
    }
}

/// Joint sandwich covariance of `sqrt(n)` times the per-unit extrapolated
/// estimates, stacked unit-major.
///
/// Every (unit, lambda) pair contributes the replicate-averaged outcome
/// scores of its pseudo-data; the correction-parameter system enters
/// through the derivative of the pseudo-data with respect to the
/// intercepts, scales and error covariances. The curve covariance is then
/// mapped through each extrapolant's sensitivity at `lambda = -1`.
fn unit_covariance(panel: &ProxyPanel, xi: &Xi, sf: &SimexFit, cfg: &SimexConfig) -> Result<DMatrix<f64>> {
    let (n, p, k) = (panel.n(), panel.p(), panel.k());
    let d = sf.fit.theta.len();
    let lay = &xi.layout;
    let mut offsets = Vec::with_capacity(sf.units.len());
    let mut total = 0;
    for c in &sf.curves {
        offsets.push(total);
        total += c.lambdas.len() * d;
    }
    let dim = total + lay.len();
    let mut sys = StackedSystem::new(n, dim);
    let nf = n as f64;

    for (u, (unit, curve)) in sf.units.iter().zip(&sf.curves).enumerate() {
        if unit.weights.is_empty() {
            return Err(MeError::Inference {
                msg: "replicate-mean SIMEX has no correction-parameter system".into(),
                rank: 0,
                dim,
            });
        }
        let y: Vec<f64> = unit.rows.iter().map(|&i| panel.y()[i]).collect();
        let z = panel.z().select_rows(&unit.rows);
        let members: Vec<usize> = (0..k).filter(|&j| unit.weights[j] > 0.0).collect();
        // Derivatives of the square root of the unit's error covariance
        // along each packed coordinate of each member's M.
        let sl = linalg::sym_len(p);
        let droot: Vec<Vec<DMatrix<f64>>> = members
            .iter()
            .map(|&j| {
                let w2 = unit.weights[j] * unit.weights[j];
                let mut out = Vec::with_capacity(sl);
                for a in 0..p {
                    for b in a..p {
                        out.push(linalg::sym_sqrt_derivative(&unit.m, &(linalg::sym_unit(p, a, b) * w2)));
                    }
                }
                out
            })
            .collect();
        let noises: Vec<DMatrix<f64>> = (0..cfg.b_reps)
            .into_par_iter()
            .map(|b| noise(cfg.seed, unit.tag, b, unit.rows.len(), p))
            .collect();

        for (r, &lambda) in curve.lambdas.iter().enumerate() {
            let theta = &curve.estimates[r];
            let reps: Vec<Option<&DMatrix<f64>>> = if lambda == 0.0 {
                vec![None]
            } else {
                curve.successes[r].iter().map(|&b| Some(&noises[b])).collect()
            };
            let nb = reps.len() as f64;
            let mut scores = DMatrix::zeros(n, d);
            let mut jac = DMatrix::zeros(d, dim);
            let col0 = offsets[u] + r * d;
            let scale = 1.0 / (nb * nf);
            for nu in &reps {
                let x = pseudo_data(unit, lambda, *nu);
                let design = Design::new(&y, &x, &z);
                // Row sums of the score derivatives. The pseudo-data are
                // linear in the noise, so the covariance derivative only
                // needs sum_i scale_i nu_ie dpsi_i/dx_c, contracted below.
                let mut sum_jac = DMatrix::zeros(d, d);
                let mut s_dx = DMatrix::zeros(d, p);
                let mut sx_dx = DMatrix::zeros(d, p);
                let mut g = vec![DVector::zeros(d); p * p];
                for (ii, &i) in unit.rows.iter().enumerate() {
                    let w: Vec<f64> = design.w.row(ii).iter().cloned().collect();
                    let s = outcome::psi(sf.family, y[ii], &w, theta);
                    for t in 0..d {
                        scores[(i, t)] += s[t] / nb;
                    }
                    sum_jac += outcome::psi_jacobian(sf.family, &w, theta);
                    let dx = outcome::psi_dx(sf.family, y[ii], &w, theta, p);
                    s_dx += &dx;
                    for c in 0..p {
                        sx_dx.column_mut(c).axpy(x[(ii, c)], &dx.column(c), 1.0);
                        if let Some(nu) = nu {
                            for e in 0..p {
                                g[c * p + e].axpy(unit.scale[ii] * nu[(ii, e)], &dx.column(c), 1.0);
                            }
                        }
                    }
                }
                let mut jt = jac.columns_mut(col0, d);
                jt += sum_jac * scale;
                for (mi, &j) in members.iter().enumerate() {
                    let wj = unit.weights[j];
                    for c in 0..p {
                        let inv = 1.0 / unit.eta1[c];
                        let mut col = jac.column_mut(total + lay.eta0(j).start + c);
                        col.axpy(-wj * inv * scale, &s_dx.column(c), 1.0);
                        let mut col = jac.column_mut(total + lay.eta1(j).start + c);
                        col.axpy(-wj * inv * scale, &sx_dx.column(c), 1.0);
                    }
                    if nu.is_some() {
                        for s_idx in 0..sl {
                            let dr = &droot[mi][s_idx];
                            let mut col = jac.column_mut(total + lay.m(j).start + s_idx);
                            for c in 0..p {
                                for e in 0..p {
                                    let f = lambda.sqrt() * dr[(e, c)] / unit.eta1[c] * scale;
                                    col.axpy(f, &g[c * p + e], 1.0);
                                }
                            }
                        }
                    }
                }
            }
            sys.push(&format!("psi:{}:{lambda}", unit.label), Some(scores), jac)?;
        }
    }
    xi.push_g_block(panel, &mut sys, total)?;
    let full = sys.sandwich()?;
    let curve_cov = full.view((0, 0), (total, total)).into_owned();
    let u_count = sf.units.len();
    let mut l = DMatrix::zeros(u_count * d, total);
    for u in 0..u_count {
        for t in 0..d {
            let infl = sf.extrapolants[u][t].influence()?;
            for (r, v) in infl.iter().enumerate() {
                l[(u * d + t, offsets[u] + r * d + t)] = *v;
            }
        }
    }
    Ok(linalg::symmetrize(&(&l * curve_cov * l.transpose())))
}

/// Sandwich covariance of `sqrt(n)(theta_simex - theta)`, treating the
/// pooling weights as fixed.
pub fn simex_sandwich(panel: &ProxyPanel, xi: &Xi, sf: &SimexFit, cfg: &SimexConfig) -> Result<DMatrix<f64>> {
    let cov = unit_covariance(panel, xi, sf, cfg)?;
    let d = sf.fit.theta.len();
    let u = sf.units.len();
    let mut q = DMatrix::zeros(d, u * d);
    for a in 0..u {
        for t in 0..d {
            q[(t, a * d + t)] = sf.weights[a][t];
        }
    }
    Ok(linalg::symmetrize(&(&q * cov * q.transpose())))
}

/// SIMEX fit with its sandwich covariance attached.
pub fn fit_simex_with_sandwich(panel: &ProxyPanel, family: Family, xi: &Xi, cfg: &SimexConfig) -> Result<SimexFit> {
    let mut sf = fit_simex(panel, family, xi, cfg)?;
    let cov = simex_sandwich(panel, xi, &sf, cfg)?;
    sf.fit = sf.fit.with_cov(&cov, CovKind::Sandwich);
    Ok(sf)
}

/// SIMEX fit with a bootstrap covariance and bias-corrected percentile
/// interval; each replicate re-estimates the correction parameters.
#[allow(clippy::too_many_arguments)]
pub fn fit_simex_bootstrap(
    panel: &ProxyPanel,
    family: Family,
    spec: &ErrorModelSpec,
    has_z: bool,
    cfg: &SimexConfig,
    reps: usize,
    seed: u64,
    level: f64,
) -> Result<SimexFit> {
    let xi = Xi::estimate(panel, spec, has_z)?;
    let mut sf = fit_simex(panel, family, &xi, cfg)?;
    let draws = bootstrap::bootstrap(panel, reps, seed, |bp| {
        let bxi = Xi::estimate(bp, spec, has_z)?;
        Ok(fit_simex(bp, family, &bxi, cfg)?.fit.theta)
    });
    let cov = draws.scaled_cov(panel.n())?;
    let (lower, upper) = draws.bc_interval(&sf.fit.theta, level)?;
    sf.fit = sf.fit.with_cov(&cov, CovKind::Bootstrap);
    sf.fit.interval = Some(Interval {
        lower,
        upper,
        level,
        replicates: draws.estimates.len(),
        failed: draws.failed,
    });
    Ok(sf)
}

/// Textbook SIMEX: every proxy is an unbiased replicate, the replicate mean
/// is the working proxy and its error covariance is the pooled
/// within-subject covariance divided by the replicate count.
pub fn standard_simex(panel: &ProxyPanel, family: Family, cfg: &SimexConfig) -> Result<SimexFit> {
    cfg.validate(panel.k())?;
    let (n, p, k) = (panel.n(), panel.p(), panel.k());
    let mom = calibration::replicate_moments(panel)?;
    let x = DMatrix::from_fn(n, p, |i, c| {
        let kap = panel.kappa(i) as f64;
        (0..k).filter(|&j| panel.observed(i, j)).map(|j| panel.value(i, j, c)).sum::<f64>() / kap
    });
    let scale = (0..n).map(|i| 1.0 / (panel.kappa(i) as f64).sqrt()).collect();
    let reference = mom.sigma_u.trace() + mom.sigma_xx.trace();
    let unit = make_unit(
        "replicate-mean".into(),
        Pattern::full(k).0 as u64,
        (0..n).collect(),
        Vec::new(),
        x,
        (DVector::zeros(p), DVector::from_element(p, 1.0)),
        mom.sigma_u.clone(),
        reference,
        scale,
    );
    let (runs, flags) = run_units(panel, family, vec![unit], cfg)?;
    let d = runs[0].estimate.len();
    let mut config = config_json(cfg, k);
    config["sigma_u_diag"] = json!(mom.sigma_u.diagonal().as_slice());
    Ok(assemble(
        panel,
        family,
        "standard-simex",
        SimexMode::AverageProxies,
        runs,
        vec![vec![1.0; d]],
        flags,
        config,
    ))
}
