//! Regression calibration with weighted proxies.
//!
//! Each missingness pattern gets its own best linear predictor
//! `X_hat = mu + beta X*(w) + gamma Z`, where `X*(w)` is the weighted average
//! of the proxies observed in that pattern and `w` is the global weight
//! vector renormalised over those proxies. The outcome model is then fitted
//! with `X_hat` in place of `X`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bootstrap;
use crate::correction::{CorrectionParams, RawMoments, Xi};
use crate::data::{ErrorModelSpec, Pattern, ProxyPanel};
use crate::error::{MeError, Result};
use crate::linalg;
use crate::outcome::{self, CovKind, Design, Family, FitResult, Interval, SolverOptions};
use crate::stacked::StackedSystem;

/// How proxy weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Equal,
    Optimal,
}

impl WeightMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(WeightMode::Equal),
            "optimal" => Ok(WeightMode::Optimal),
            other => Err(MeError::Config(format!("unknown weight mode '{other}'"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            WeightMode::Equal => "equal",
            WeightMode::Optimal => "optimal",
        }
    }
}

/// Weights below this are treated as exactly zero.
const ZERO_WEIGHT: f64 = 1e-10;

/// Global weights renormalised over the proxies in `pattern`. Falls back to
/// equal weights over the pattern when every member has zero weight.
pub fn pattern_weights(alpha: &[f64], pattern: Pattern) -> Vec<f64> {
    let k = alpha.len();
    let total: f64 = (0..k).filter(|&j| pattern.contains(j)).map(|j| alpha[j]).sum();
    if total > ZERO_WEIGHT {
        (0..k)
            .map(|j| if pattern.contains(j) { alpha[j] / total } else { 0.0 })
            .collect()
    } else {
        let c = pattern.count() as f64;
        (0..k)
            .map(|j| if pattern.contains(j) { 1.0 / c } else { 0.0 })
            .collect()
    }
}

fn pattern_total(alpha: &[f64], pattern: Pattern) -> f64 {
    (0..alpha.len()).filter(|&j| pattern.contains(j)).map(|j| alpha[j]).sum()
}

/// Affine calibration map for one missingness pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct BlupMap {
    pub pattern: Pattern,
    /// Length `k`, zero outside the pattern, summing to one.
    pub weights: Vec<f64>,
    pub mu: DVector<f64>,
    pub beta: DMatrix<f64>,
    /// `p x q`; zero columns when covariates do not enter the predictor.
    pub gamma: DMatrix<f64>,
}

impl BlupMap {
    /// Weighted proxy for subject `i`, who must follow this map's pattern.
    pub fn combined(&self, panel: &ProxyPanel, i: usize) -> DVector<f64> {
        let p = panel.p();
        let mut out = DVector::zeros(p);
        for (j, &w) in self.weights.iter().enumerate() {
            if w != 0.0 {
                for c in 0..p {
                    out[c] += w * panel.value(i, j, c);
                }
            }
        }
        out
    }

    pub fn predict(&self, panel: &ProxyPanel, i: usize) -> DVector<f64> {
        let xs = self.combined(panel, i);
        let mut out = &self.mu + &self.beta * xs;
        if self.gamma.ncols() > 0 {
            let z = panel.z().row(i).transpose();
            out += &self.gamma * z;
        }
        out
    }

    /// `[beta gamma]`.
    pub fn k_matrix(&self) -> DMatrix<f64> {
        let p = self.beta.nrows();
        let r = p + self.gamma.ncols();
        let mut k = DMatrix::zeros(p, r);
        k.columns_mut(0, p).copy_from(&self.beta);
        if r > p {
            k.columns_mut(p, r - p).copy_from(&self.gamma);
        }
        k
    }
}

/// Moments of `(X*(w), Z)` and their covariance with `X`.
struct BlupMoments {
    /// `[mu_*; mu_Z]`.
    centre: DVector<f64>,
    /// Joint covariance of `(X*(w), Z)`.
    joint: DMatrix<f64>,
    /// `[cov(X, X*(w)), cov(X, Z)]`.
    cross: DMatrix<f64>,
}

fn blup_moments(raw: &RawMoments, par: &CorrectionParams, has_z: bool, w: &[f64]) -> BlupMoments {
    let (k, p) = (raw.k, raw.p);
    let q = if has_z { raw.q } else { 0 };
    let r = p + q;
    let mut centre = DVector::zeros(r);
    let mut joint = DMatrix::zeros(r, r);
    let mut cross = DMatrix::zeros(p, r);
    for j in 0..k {
        if w[j] == 0.0 {
            continue;
        }
        centre.rows_mut(0, p).axpy(w[j], &raw.mu[j], 1.0);
        let mut c = cross.columns_mut(0, p);
        c += &par.sigma_xxj[j] * w[j];
        for l in 0..k {
            if w[l] != 0.0 {
                let mut s = joint.view_mut((0, 0), (p, p));
                s += &raw.sigma[j][l] * (w[j] * w[l]);
            }
        }
        if q > 0 {
            let sz = raw.sigma_zj[j].transpose() * w[j];
            let mut top = joint.view_mut((0, p), (p, q));
            top += &sz;
            let mut left = joint.view_mut((p, 0), (q, p));
            left += sz.transpose();
        }
    }
    if q > 0 {
        centre.rows_mut(p, q).copy_from(&raw.mu_z);
        joint.view_mut((p, p), (q, q)).copy_from(&raw.sigma_zz);
        cross.columns_mut(p, q).copy_from(&par.sigma_zx.transpose());
    }
    BlupMoments { centre, joint, cross }
}

fn solve_k(m: &BlupMoments) -> Result<DMatrix<f64>> {
    let inv = linalg::try_inverse(&linalg::symmetrize(&m.joint)).ok_or_else(|| {
        MeError::Calibration("joint covariance of the weighted proxy and covariates is singular".into())
    })?;
    Ok(&m.cross * inv)
}

/// Predictor for one pattern at the given global weights.
pub fn build_blup(xi: &Xi, alpha: &[f64], pattern: Pattern) -> Result<BlupMap> {
    let w = pattern_weights(alpha, pattern);
    let mom = blup_moments(&xi.raw, &xi.params, xi.has_z, &w);
    let kmat = solve_k(&mom)?;
    let p = xi.raw.p;
    let beta = kmat.columns(0, p).into_owned();
    let gamma = kmat.columns(p, kmat.ncols() - p).into_owned();
    let mu = &xi.params.mu_x - &kmat * &mom.centre;
    Ok(BlupMap {
        pattern,
        weights: w,
        mu,
        beta,
        gamma,
    })
}

/// `tr E{(X - X_hat)(X - X_hat)^T}` of the predictor for one pattern.
pub fn blup_mse(xi: &Xi, alpha: &[f64], pattern: Pattern) -> Result<f64> {
    let w = pattern_weights(alpha, pattern);
    let mom = blup_moments(&xi.raw, &xi.params, xi.has_z, &w);
    let kmat = solve_k(&mom)?;
    Ok((&xi.params.sigma_xx - &kmat * mom.cross.transpose()).trace())
}

/// Derivative of the pattern MSE with respect to each within-pattern weight
/// `w_j`, holding the predictor at its optimum for `w`:
/// `-2 tr{beta^T (cov(X, X*_j) - beta cov(X*, X*_j) - gamma cov(Z, X*_j))}`.
fn mse_weight_gradient(
    raw: &RawMoments,
    par: &CorrectionParams,
    has_z: bool,
    w: &[f64],
    kmat: &DMatrix<f64>,
    pattern: Pattern,
) -> Vec<f64> {
    let (k, p) = (raw.k, raw.p);
    let q = if has_z { raw.q } else { 0 };
    let beta = kmat.columns(0, p);
    let mut out = vec![0.0; k];
    for (j, o) in out.iter_mut().enumerate() {
        if !pattern.contains(j) {
            continue;
        }
        let mut resid = par.sigma_xxj[j].clone();
        for l in 0..k {
            if w[l] != 0.0 {
                resid -= beta * &raw.sigma[l][j] * w[l];
            }
        }
        if q > 0 {
            resid -= kmat.columns(p, q) * &raw.sigma_zj[j];
        }
        *o = -2.0 * (beta.transpose() * resid).trace();
    }
    out
}

/// Pattern and its empirical frequency.
pub type PatternWeight = (Pattern, f64);

pub fn pattern_frequencies(panel: &ProxyPanel) -> Vec<PatternWeight> {
    let n = panel.n() as f64;
    panel
        .patterns()
        .into_iter()
        .map(|g| (g.pattern, g.rows.len() as f64 / n))
        .collect()
}

/// Frequency-weighted BLUP MSE over patterns.
pub fn weighted_mse(xi: &Xi, alpha: &[f64], patterns: &[PatternWeight]) -> Result<f64> {
    let mut total = 0.0;
    for &(pat, pi) in patterns {
        total += pi * blup_mse(xi, alpha, pat)?;
    }
    Ok(total)
}

fn alpha_gradient_at(
    raw: &RawMoments,
    par: &CorrectionParams,
    has_z: bool,
    alpha: &[f64],
    patterns: &[PatternWeight],
    kmats: &[DMatrix<f64>],
) -> Vec<f64> {
    let k = alpha.len();
    let mut grad = vec![0.0; k];
    for (&(pat, pi), kmat) in patterns.iter().zip(kmats) {
        let s = pattern_total(alpha, pat);
        if s <= ZERO_WEIGHT {
            continue;
        }
        let w = pattern_weights(alpha, pat);
        let g = mse_weight_gradient(raw, par, has_z, &w, kmat, pat);
        let euler: f64 = (0..k).map(|j| w[j] * g[j]).sum();
        for m in 0..k {
            if pat.contains(m) {
                grad[m] += pi * (g[m] - euler) / s;
            }
        }
    }
    grad
}

/// Gradient of [`weighted_mse`] with respect to the global weights.
pub fn weighted_mse_gradient(xi: &Xi, alpha: &[f64], patterns: &[PatternWeight]) -> Result<Vec<f64>> {
    let mut kmats = Vec::with_capacity(patterns.len());
    for &(pat, _) in patterns {
        let w = pattern_weights(alpha, pat);
        kmats.push(solve_k(&blup_moments(&xi.raw, &xi.params, xi.has_z, &w))?);
    }
    Ok(alpha_gradient_at(&xi.raw, &xi.params, xi.has_z, alpha, patterns, &kmats))
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Result of the weight search.
#[derive(Debug, Clone)]
pub struct AlphaSearch {
    pub alpha: Vec<f64>,
    pub mse: f64,
    pub equal_mse: f64,
    pub converged: bool,
    pub fallback: bool,
}

struct Descent {
    x: Vec<f64>,
    f: f64,
    converged: bool,
}

fn projected_descent<F, G>(f: &F, grad: &G, x0: Vec<f64>) -> Option<Descent>
where
    F: Fn(&[f64]) -> Option<f64>,
    G: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let mut x = project_simplex(&x0);
    let mut fx = f(&x)?;
    let mut g = grad(&x)?;
    let gmax = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut step = if gmax > 0.0 { 0.1 / gmax } else { 1.0 };
    for _ in 0..500 {
        let pg: Vec<f64> = project_simplex(&x.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>())
            .iter()
            .zip(&x)
            .map(|(a, b)| a - b)
            .collect();
        let pg_norm = pg.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if pg_norm < 1e-11 {
            return Some(Descent { x, f: fx, converged: true });
        }
        let mut t = step;
        let (xn, fnew) = loop {
            let cand = project_simplex(&x.iter().zip(&g).map(|(a, b)| a - t * b).collect::<Vec<_>>());
            let dec: f64 = g.iter().zip(cand.iter().zip(&x)).map(|(gi, (c, xi))| gi * (c - xi)).sum();
            if let Some(fc) = f(&cand) {
                if fc <= fx + 1e-4 * dec {
                    break (cand, fc);
                }
            }
            t *= 0.5;
            if t < 1e-20 {
                return Some(Descent { x, f: fx, converged: pg_norm < 1e-7 });
            }
        };
        let gn = grad(&xn)?;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { ss / sy } else { 10.0 * t };
        let small = ss.sqrt() < 1e-15;
        x = xn;
        fx = fnew;
        g = gn;
        if small {
            return Some(Descent { x, f: fx, converged: true });
        }
    }
    Some(Descent { x, f: fx, converged: false })
}

/// Minimises the frequency-weighted BLUP MSE over the probability simplex,
/// starting from the centroid and from each vertex nudged inward. Falls back
/// to equal weights when no start yields a finite objective.
pub fn optimal_alpha(xi: &Xi, patterns: &[PatternWeight]) -> Result<AlphaSearch> {
    let k = xi.raw.k;
    let equal = vec![1.0 / k as f64; k];
    let equal_mse = weighted_mse(xi, &equal, patterns)?;
    if k == 1 {
        return Ok(AlphaSearch {
            alpha: equal,
            mse: equal_mse,
            equal_mse,
            converged: true,
            fallback: false,
        });
    }
    let f = |a: &[f64]| weighted_mse(xi, a, patterns).ok().filter(|v| v.is_finite());
    let g = |a: &[f64]| weighted_mse_gradient(xi, a, patterns).ok();
    let eps = 0.05;
    let mut starts = vec![equal.clone()];
    for m in 0..k {
        starts.push((0..k).map(|j| eps / k as f64 + if j == m { 1.0 - eps } else { 0.0 }).collect());
    }
    let mut best: Option<Descent> = None;
    for s in starts {
        if let Some(d) = projected_descent(&f, &g, s) {
            if best.as_ref().is_none_or(|b| d.f < b.f) {
                best = Some(d);
            }
        }
    }
    match best {
        Some(b) if b.f <= equal_mse => Ok(AlphaSearch {
            alpha: b.x,
            mse: b.f,
            equal_mse,
            converged: b.converged,
            fallback: false,
        }),
        _ => Ok(AlphaSearch {
            alpha: equal,
            mse: equal_mse,
            equal_mse,
            converged: false,
            fallback: true,
        }),
    }
}

/// Regression-calibration fit together with everything the sandwich needs.
#[derive(Debug, Clone)]
pub struct RcFit {
    pub fit: FitResult,
    pub mode: WeightMode,
    pub alpha: Vec<f64>,
    pub patterns: Vec<PatternWeight>,
    pub blups: Vec<BlupMap>,
    pub xhat: DMatrix<f64>,
    pub family: Family,
}

/// Calibrated covariates: one row per subject.
pub fn calibrate(panel: &ProxyPanel, blups: &[BlupMap]) -> Result<DMatrix<f64>> {
    let mut xhat = DMatrix::zeros(panel.n(), panel.p());
    for i in 0..panel.n() {
        let pat = panel.pattern(i);
        let b = blups
            .iter()
            .find(|b| b.pattern == pat)
            .ok_or_else(|| MeError::Calibration(format!("no predictor for pattern {:#b}", pat.0)))?;
        xhat.row_mut(i).copy_from(&b.predict(panel, i).transpose());
    }
    Ok(xhat)
}

/// Calibrates each pattern and fits the outcome model on `X_hat`.
pub fn fit_rc(panel: &ProxyPanel, family: Family, xi: &Xi, mode: WeightMode) -> Result<RcFit> {
    let patterns = pattern_frequencies(panel);
    let mut flags = Vec::new();
    let alpha = match mode {
        WeightMode::Equal => vec![1.0 / xi.raw.k as f64; xi.raw.k],
        WeightMode::Optimal => {
            let s = optimal_alpha(xi, &patterns)?;
            if s.fallback {
                flags.push("optimal-weights-fell-back-to-equal".to_string());
            } else if !s.converged {
                flags.push("optimal-weights-not-converged".to_string());
            }
            s.alpha
        }
    };
    let blups = patterns
        .iter()
        .map(|&(pat, _)| build_blup(xi, &alpha, pat))
        .collect::<Result<Vec<_>>>()?;
    let xhat = calibrate(panel, &blups)?;
    let design = Design::new(panel.y(), &xhat, panel.z());
    let root = outcome::solve_m(family, &design, None, SolverOptions::default())?;
    let mut fit = FitResult::new(&format!("gen-rc-{}", mode.tag()), root, panel.n(), panel.p(), panel.q());
    fit.flags = flags;
    fit.config = json!({
        "weights": mode.tag(),
        "alpha": alpha,
        "covariates_in_predictor": xi.has_z,
        "patterns": patterns.iter().map(|(p, f)| json!({"members": p.members(xi.raw.k).iter().map(|j| j + 1).collect::<Vec<_>>(), "frequency": f})).collect::<Vec<_>>(),
    });
    Ok(RcFit {
        fit,
        mode,
        alpha,
        patterns,
        blups,
        xhat,
        family,
    })
}

/// Column offsets of the stacked calibration system.
struct RcLayout {
    d: usize,
    p: usize,
    r: usize,
    npat: usize,
    k: usize,
    optimal: bool,
    xi_len: usize,
}

impl RcLayout {
    fn pattern_block(&self) -> usize {
        self.p + self.p * self.r
    }

    fn mu(&self, b: usize) -> usize {
        self.d + b * self.pattern_block()
    }

    fn kmat(&self, b: usize) -> usize {
        self.mu(b) + self.p
    }

    fn alpha(&self) -> usize {
        self.d + self.npat * self.pattern_block()
    }

    fn pi(&self) -> usize {
        self.alpha() + self.k
    }

    fn xi(&self) -> usize {
        if self.optimal {
            self.pi() + self.npat
        } else {
            self.alpha()
        }
    }

    fn dim(&self) -> usize {
        self.xi() + self.xi_len
    }
}

/// Sandwich covariance of `sqrt(n)(theta_hat - theta)` for a calibration fit,
/// from the stacked outcome scores, predictor normal equations, weight
/// stationarity and pattern-frequency rows (optimal weights only), and the
/// correction-parameter system.
pub fn rc_sandwich(panel: &ProxyPanel, xi: &Xi, rc: &RcFit) -> Result<DMatrix<f64>> {
    rc_sandwich_detail(panel, xi, rc).map(|(c, _)| c)
}

/// Like [`rc_sandwich`], also reporting whether optimal weights had to be
/// treated as fixed. That happens when the MSE surface is flat in the
/// weights (for example error-free proxies), so the stationarity rows carry
/// no information.
pub fn rc_sandwich_detail(panel: &ProxyPanel, xi: &Xi, rc: &RcFit) -> Result<(DMatrix<f64>, bool)> {
    let optimal = rc.mode == WeightMode::Optimal;
    let first = rc_system(panel, xi, rc, optimal).and_then(|(sys, lay)| {
        let full = sys.sandwich()?;
        Ok(full.view((0, 0), (lay.d, lay.d)).into_owned())
    });
    match first {
        Ok(c) => Ok((c, false)),
        Err(MeError::Inference { .. }) if optimal => {
            let (sys, lay) = rc_system(panel, xi, rc, false)?;
            let full = sys.sandwich()?;
            Ok((full.view((0, 0), (lay.d, lay.d)).into_owned(), true))
        }
        Err(e) => Err(e),
    }
}

/// The stacked system behind [`rc_sandwich`], exposed for inspection.
pub fn rc_stacked_system(panel: &ProxyPanel, xi: &Xi, rc: &RcFit) -> Result<StackedSystem> {
    rc_system(panel, xi, rc, rc.mode == WeightMode::Optimal).map(|(s, _)| s)
}

fn rc_system(panel: &ProxyPanel, xi: &Xi, rc: &RcFit, optimal: bool) -> Result<(StackedSystem, RcLayout)> {
    let (n, p, k) = (panel.n(), panel.p(), panel.k());
    let q_eff = if xi.has_z { panel.q() } else { 0 };
    let theta = &rc.fit.theta;
    let d = theta.len();
    let lay = RcLayout {
        d,
        p,
        r: p + q_eff,
        npat: rc.patterns.len(),
        k,
        optimal,
        xi_len: xi.layout.len(),
    };
    let dim = lay.dim();
    let mut sys = StackedSystem::new(n, dim);
    let pat_index = |pat: Pattern| rc.patterns.iter().position(|&(p2, _)| p2 == pat);

    // Outcome scores.
    let design = Design::new(panel.y(), &rc.xhat, panel.z());
    let mut scores = DMatrix::zeros(n, d);
    let mut jac = DMatrix::zeros(d, dim);
    for i in 0..n {
        let w: Vec<f64> = design.w.row(i).iter().cloned().collect();
        let y = panel.y()[i];
        scores.row_mut(i).copy_from(&outcome::psi(rc.family, y, &w, theta).transpose());
        let mut jt = jac.columns_mut(0, d);
        jt += outcome::psi_jacobian(rc.family, &w, theta);
        let b = pat_index(panel.pattern(i))
            .ok_or_else(|| MeError::Inference { msg: "subject pattern missing from fit".into(), rank: 0, dim })?;
        let blup = &rc.blups[b];
        let dx = outcome::psi_dx(rc.family, y, &w, theta, p);
        let mut jm = jac.columns_mut(lay.mu(b), p);
        jm += &dx;
        let xs = blup.combined(panel, i);
        let mut u = DVector::zeros(lay.r);
        u.rows_mut(0, p).copy_from(&xs);
        for c in 0..q_eff {
            u[p + c] = panel.z()[(i, c)];
        }
        for a in 0..p {
            for c in 0..lay.r {
                let mut col = jac.column_mut(lay.kmat(b) + a * lay.r + c);
                col.axpy(u[c], &dx.column(a), 1.0);
            }
        }
        if lay.optimal {
            let s = pattern_total(&rc.alpha, blup.pattern);
            if s > ZERO_WEIGHT {
                for m in 0..k {
                    if blup.pattern.contains(m) {
                        let diff = DVector::from_fn(p, |c, _| panel.value(i, m, c) - xs[c]) / s;
                        let dxa = &dx * (&blup.beta * diff);
                        let mut col = jac.column_mut(lay.alpha() + m);
                        col += dxa;
                    }
                }
            }
        }
    }
    jac /= n as f64;
    sys.push("psi", Some(scores), jac)?;

    // Parameter vector at the estimate.
    let mut v = vec![0.0; dim];
    v[..d].copy_from_slice(theta);
    for (b, blup) in rc.blups.iter().enumerate() {
        v[lay.mu(b)..lay.mu(b) + p].copy_from_slice(blup.mu.as_slice());
        let km = blup.k_matrix();
        for a in 0..p {
            for c in 0..lay.r {
                v[lay.kmat(b) + a * lay.r + c] = km[(a, c)];
            }
        }
    }
    if lay.optimal {
        v[lay.alpha()..lay.alpha() + k].copy_from_slice(&rc.alpha);
        for (b, &(_, pi)) in rc.patterns.iter().enumerate() {
            v[lay.pi() + b] = pi;
        }
    }
    let xv = xi.to_vec();
    v[lay.xi()..].copy_from_slice(&xv);

    // Predictor normal equations, then weight stationarity.
    let h_rows = lay.npat * lay.pattern_block();
    let active: Vec<bool> = rc.alpha.iter().map(|&a| a > ZERO_WEIGHT).collect();
    let last_active = active.iter().rposition(|&a| a);
    let alpha_rows = if lay.optimal { k } else { 0 };
    let eval = |x: &[f64]| -> DVector<f64> {
        let xs = &x[lay.xi()..];
        let raw = xi.raw_from_vec(xs);
        let par = xi.params_from_vec(xs);
        let alpha: Vec<f64> = if lay.optimal {
            x[lay.alpha()..lay.alpha() + k].to_vec()
        } else {
            rc.alpha.clone()
        };
        let mut out = DVector::zeros(h_rows + alpha_rows);
        let mut kmats = Vec::with_capacity(lay.npat);
        for (b, &(pat, _)) in rc.patterns.iter().enumerate() {
            let w = pattern_weights(&alpha, pat);
            let mom = blup_moments(&raw, &par, xi.has_z, &w);
            let mu = DVector::from_column_slice(&x[lay.mu(b)..lay.mu(b) + p]);
            let km = DMatrix::from_row_slice(p, lay.r, &x[lay.kmat(b)..lay.kmat(b) + p * lay.r]);
            let rm = &par.mu_x - mu - &km * &mom.centre;
            let rk = &mom.cross - &km * &mom.joint;
            let base = b * lay.pattern_block();
            out.rows_mut(base, p).copy_from(&rm);
            for a in 0..p {
                for c in 0..lay.r {
                    out[base + p + a * lay.r + c] = rk[(a, c)];
                }
            }
            kmats.push(km);
        }
        if lay.optimal {
            let pis: Vec<PatternWeight> = rc
                .patterns
                .iter()
                .enumerate()
                .map(|(b, &(pat, _))| (pat, x[lay.pi() + b]))
                .collect();
            let grad = alpha_gradient_at(&raw, &par, xi.has_z, &alpha, &pis, &kmats);
            for m in 0..k {
                out[h_rows + m] = if !active[m] {
                    alpha[m]
                } else if Some(m) == last_active {
                    alpha.iter().sum::<f64>() - 1.0
                } else {
                    grad[m]
                };
            }
        }
        out
    };
    let cols: Vec<usize> = (d..dim).collect();
    let jh = linalg::numeric_jacobian(eval, &v, &cols, h_rows + alpha_rows);
    let mut hjac = DMatrix::zeros(h_rows + alpha_rows, dim);
    hjac.columns_mut(d, dim - d).copy_from(&jh);
    sys.push("calibration", None, hjac)?;

    if lay.optimal {
        let mut sc = DMatrix::zeros(n, lay.npat);
        for i in 0..n {
            let b = pat_index(panel.pattern(i)).unwrap_or(0);
            for (c, &(_, pi)) in rc.patterns.iter().enumerate() {
                sc[(i, c)] = pi - if c == b { 1.0 } else { 0.0 };
            }
        }
        let mut pj = DMatrix::zeros(lay.npat, dim);
        for c in 0..lay.npat {
            pj[(c, lay.pi() + c)] = 1.0;
        }
        sys.push("pattern-frequency", Some(sc), pj)?;
    }
    xi.push_g_block(panel, &mut sys, lay.xi())?;
    Ok((sys, lay))
}

/// Calibration fit with its sandwich covariance attached.
pub fn fit_rc_with_sandwich(panel: &ProxyPanel, family: Family, xi: &Xi, mode: WeightMode) -> Result<RcFit> {
    let mut rc = fit_rc(panel, family, xi, mode)?;
    let (cov, fixed) = rc_sandwich_detail(panel, xi, &rc)?;
    if fixed {
        rc.fit.flags.push("weights-treated-as-fixed-in-sandwich".into());
    }
    rc.fit = rc.fit.with_cov(&cov, CovKind::Sandwich);
    Ok(rc)
}

/// Calibration fit with a bootstrap covariance and bias-corrected percentile
/// interval. Each replicate re-estimates the correction parameters and, in
/// optimal mode, the weights.
#[allow(clippy::too_many_arguments)]
pub fn fit_rc_bootstrap(
    panel: &ProxyPanel,
    family: Family,
    spec: &ErrorModelSpec,
    has_z: bool,
    mode: WeightMode,
    reps: usize,
    seed: u64,
    level: f64,
) -> Result<RcFit> {
    let xi = Xi::estimate(panel, spec, has_z)?;
    let mut rc = fit_rc(panel, family, &xi, mode)?;
    let draws = bootstrap::bootstrap(panel, reps, seed, |bp| {
        let bxi = Xi::estimate(bp, spec, has_z)?;
        Ok(fit_rc(bp, family, &bxi, mode)?.fit.theta)
    });
    let cov = draws.scaled_cov(panel.n())?;
    let (lower, upper) = draws.bc_interval(&rc.fit.theta, level)?;
    rc.fit = rc.fit.with_cov(&cov, CovKind::Bootstrap);
    rc.fit.interval = Some(Interval {
        lower,
        upper,
        level,
        replicates: draws.estimates.len(),
        failed: draws.failed,
    });
    Ok(rc)
}

/// Moments used by the textbook replicate-mean calibration.
#[derive(Debug, Clone)]
pub struct ReplicateMoments {
    pub mu_x: DVector<f64>,
    pub sigma_xx: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    pub sigma_xz: DMatrix<f64>,
    pub mu_z: DVector<f64>,
    pub sigma_zz: DMatrix<f64>,
}

/// Treats every proxy as an unbiased replicate with a common error
/// covariance. Moments use divisor `n` so that exchangeable complete data
/// reproduce the pairwise-moment estimates exactly.
pub fn replicate_moments(panel: &ProxyPanel) -> Result<ReplicateMoments> {
    let (n, p, q, k) = (panel.n(), panel.p(), panel.q(), panel.k());
    let mut means = DMatrix::zeros(n, p);
    let mut total_kappa = 0.0;
    let mut dof = 0.0;
    let mut sigma_u = DMatrix::zeros(p, p);
    for i in 0..n {
        let kap = panel.kappa(i) as f64;
        let mut m = DVector::zeros(p);
        for j in 0..k {
            if panel.observed(i, j) {
                for c in 0..p {
                    m[c] += panel.value(i, j, c) / kap;
                }
            }
        }
        for j in 0..k {
            if panel.observed(i, j) {
                let dv = DVector::from_fn(p, |c, _| panel.value(i, j, c) - m[c]);
                sigma_u += &dv * dv.transpose();
            }
        }
        means.row_mut(i).copy_from(&m.transpose());
        total_kappa += kap;
        dof += kap - 1.0;
    }
    if dof <= 0.0 {
        return Err(MeError::Calibration("no subject has more than one proxy".into()));
    }
    sigma_u /= dof;
    let mut mu_x = DVector::zeros(p);
    for i in 0..n {
        mu_x += means.row(i).transpose() * (panel.kappa(i) as f64 / total_kappa);
    }
    let mu_z = if q > 0 {
        panel.z().row_mean().transpose()
    } else {
        DVector::zeros(0)
    };
    let mut sxx = DMatrix::zeros(p, p);
    let mut sxz = DMatrix::zeros(p, q);
    let mut szz = DMatrix::zeros(q, q);
    for i in 0..n {
        let kap = panel.kappa(i) as f64;
        let dx = means.row(i).transpose() - &mu_x;
        sxx += &dx * dx.transpose() * kap;
        if q > 0 {
            let dz = panel.z().row(i).transpose() - &mu_z;
            sxz += &dx * dz.transpose() * kap;
            szz += &dz * dz.transpose();
        }
    }
    let sigma_xx = linalg::symmetrize(&((sxx - &sigma_u * n as f64) / total_kappa));
    Ok(ReplicateMoments {
        mu_x,
        sigma_xx,
        sigma_u,
        sigma_xz: sxz / total_kappa,
        mu_z,
        sigma_zz: szz / n as f64,
    })
}

/// Textbook calibration: replicate mean as the proxy and a predictor that
/// depends only on the replicate count.
pub fn standard_rc(panel: &ProxyPanel, family: Family) -> Result<(FitResult, DMatrix<f64>)> {
    let (n, p, q, k) = (panel.n(), panel.p(), panel.q(), panel.k());
    let mom = replicate_moments(panel)?;
    let r = p + q;
    let mut maps: Vec<Option<(DMatrix<f64>, DVector<f64>)>> = vec![None; k + 1];
    let mut xhat = DMatrix::zeros(n, p);
    for i in 0..n {
        let kap = panel.kappa(i);
        if maps[kap].is_none() {
            let mut joint = DMatrix::zeros(r, r);
            joint
                .view_mut((0, 0), (p, p))
                .copy_from(&(&mom.sigma_xx + &mom.sigma_u / kap as f64));
            let mut cross = DMatrix::zeros(p, r);
            cross.columns_mut(0, p).copy_from(&mom.sigma_xx);
            let mut centre = DVector::zeros(r);
            centre.rows_mut(0, p).copy_from(&mom.mu_x);
            if q > 0 {
                joint.view_mut((0, p), (p, q)).copy_from(&mom.sigma_xz);
                joint.view_mut((p, 0), (q, p)).copy_from(&mom.sigma_xz.transpose());
                joint.view_mut((p, p), (q, q)).copy_from(&mom.sigma_zz);
                cross.columns_mut(p, q).copy_from(&mom.sigma_xz);
                centre.rows_mut(p, q).copy_from(&mom.mu_z);
            }
            let kmat = solve_k(&BlupMoments { centre: centre.clone(), joint, cross })?;
            maps[kap] = Some((kmat, centre));
        }
        let (kmat, centre) = maps[kap].as_ref().expect("map built above");
        let mut u = DVector::zeros(r);
        for j in 0..k {
            if panel.observed(i, j) {
                for c in 0..p {
                    u[c] += panel.value(i, j, c) / kap as f64;
                }
            }
        }
        for c in 0..q {
            u[p + c] = panel.z()[(i, c)];
        }
        let xh = &mom.mu_x + kmat * (u - centre);
        xhat.row_mut(i).copy_from(&xh.transpose());
    }
    let design = Design::new(panel.y(), &xhat, panel.z());
    let root = outcome::solve_m(family, &design, None, SolverOptions::default())?;
    let mut fit = FitResult::new("standard-rc", root, n, p, q);
    fit.config = json!({
        "mu_x": mom.mu_x.as_slice(),
        "sigma_u_diag": mom.sigma_u.diagonal().as_slice(),
    });
    Ok((fit, xhat))
}
