//! Checks to run before trusting a correction: linearity between pairs of
//! proxies, and flatness of SIMEX lambda curves.
//!
//! Under the error model every proxy is affine in the same `X`, so the
//! regression of one proxy on another is linear whenever the joint law is
//! normal. Curvature in that regression is evidence against the model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::ProxyPanel;
use crate::error::{MeError, Result};
use crate::simex::{curve_flatness, Flatness, SimexCurve};

/// Smallest number of co-observed subjects accepted.
pub const MIN_CO_OBSERVED: usize = 20;

/// Linear against quadratic regression of component `component` of proxy
/// `j` on the same component of proxy `l`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairLinearity {
    pub j: usize,
    pub l: usize,
    pub component: usize,
    pub n: usize,
    /// Intercept and slope of the linear fit.
    pub linear: [f64; 2],
    /// Intercept, slope and curvature of the quadratic fit.
    pub quadratic: [f64; 3],
    /// Heteroskedasticity-robust Wald statistic of the curvature term.
    pub wald: f64,
    pub p_value: f64,
    pub r2_linear: f64,
    pub r2_quadratic: f64,
    pub r2_increment: f64,
    /// Mean linear-fit residual within each decile of the fitted values.
    pub decile_residual_means: Vec<f64>,
}

struct Ols {
    beta: DVector<f64>,
    resid: DVector<f64>,
    r2: f64,
}

fn ols(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<Ols> {
    let qr = design.clone().qr();
    let r = qr.r();
    if (0..r.nrows()).any(|i| r[(i, i)].abs() <= 1e-12 * r.amax().max(f64::MIN_POSITIVE)) {
        return Err(MeError::Diagnostic("regressors are collinear".into()));
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| MeError::Diagnostic("regressors are collinear".into()))?;
    let resid = y - design * &beta;
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let rss = resid.norm_squared();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Ok(Ols { beta, resid, r2 })
}

/// Regresses proxy `j` on proxy `l` over the subjects observing both, one
/// report per component.
///
/// When the pair is collinear with its square (for example `j == l`) the
/// quadratic term is not estimable; the report then carries the linear fit
/// with a zero curvature, a zero Wald statistic and p-value one.
pub fn proxy_pair_linearity(panel: &ProxyPanel, j: usize, l: usize) -> Result<Vec<PairLinearity>> {
    let k = panel.k();
    if j >= k || l >= k {
        return Err(MeError::Config(format!("proxy index out of range (k = {k})")));
    }
    let rows: Vec<usize> = (0..panel.n()).filter(|&i| panel.observed(i, j) && panel.observed(i, l)).collect();
    if rows.len() < MIN_CO_OBSERVED {
        return Err(MeError::Diagnostic(format!(
            "proxies {} and {} are co-observed on {} subjects, need {MIN_CO_OBSERVED}",
            j + 1,
            l + 1,
            rows.len()
        )));
    }
    (0..panel.p()).map(|c| pair_component(panel, j, l, c, &rows)).collect()
}

fn pair_component(panel: &ProxyPanel, j: usize, l: usize, c: usize, rows: &[usize]) -> Result<PairLinearity> {
    let n = rows.len();
    let y = DVector::from_iterator(n, rows.iter().map(|&i| panel.value(i, j, c)));
    let x: Vec<f64> = rows.iter().map(|&i| panel.value(i, l, c)).collect();
    // Centre and scale the regressor so the square is well conditioned.
    let xm = x.iter().sum::<f64>() / n as f64;
    let xs = (x.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(xs > 0.0) {
        return Err(MeError::Diagnostic(format!("proxy {} is constant", l + 1)));
    }
    let u: Vec<f64> = x.iter().map(|v| (v - xm) / xs).collect();
    let d1 = DMatrix::from_fn(n, 2, |i, a| if a == 0 { 1.0 } else { u[i] });
    let lin = ols(&d1, &y)?;
    let linear = [lin.beta[0] - lin.beta[1] * xm / xs, lin.beta[1] / xs];

    let d2 = DMatrix::from_fn(n, 3, |i, a| u[i].powi(a as i32));
    let (quadratic, wald, r2_quadratic) = match ols(&d2, &y) {
        Ok(q) => {
            let w = robust_wald(&d2, &q.resid, q.beta[2])?;
            let (b0, b1, b2) = (q.beta[0], q.beta[1], q.beta[2]);
            let quad = [
                b0 - b1 * xm / xs + b2 * xm * xm / (xs * xs),
                b1 / xs - 2.0 * b2 * xm / (xs * xs),
                b2 / (xs * xs),
            ];
            (quad, w, q.r2)
        }
        Err(_) => ([linear[0], linear[1], 0.0], 0.0, lin.r2),
    };
    let p_value = ChiSquared::new(1.0)
        .map_err(|e| MeError::Diagnostic(e.to_string()))?
        .sf(wald);

    let fitted: Vec<f64> = (0..n).map(|i| y[i] - lin.resid[i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fitted[a].total_cmp(&fitted[b]).then(a.cmp(&b)));
    let decile_residual_means = (0..10)
        .map(|g| {
            let (lo, hi) = (g * n / 10, (g + 1) * n / 10);
            let s: f64 = order[lo..hi].iter().map(|&i| lin.resid[i]).sum();
            s / (hi - lo).max(1) as f64
        })
        .collect();

    Ok(PairLinearity {
        j,
        l,
        component: c,
        n,
        linear,
        quadratic,
        wald,
        p_value,
        r2_linear: lin.r2,
        r2_quadratic,
        r2_increment: (r2_quadratic - lin.r2).max(0.0),
        decile_residual_means,
    })
}

/// HC0 Wald statistic for the last coefficient.
fn robust_wald(design: &DMatrix<f64>, resid: &DVector<f64>, coef: f64) -> Result<f64> {
    let xtx = design.transpose() * design;
    let bread = xtx
        .try_inverse()
        .ok_or_else(|| MeError::Diagnostic("regressors are collinear".into()))?;
    let mut meat = DMatrix::zeros(design.ncols(), design.ncols());
    for i in 0..design.nrows() {
        let row = design.row(i).transpose();
        meat += &row * row.transpose() * resid[i].powi(2);
    }
    let last = design.ncols() - 1;
    let var = (&bread * meat * &bread)[(last, last)];
    if var > 0.0 {
        Ok(coef * coef / var)
    } else {
        Ok(0.0)
    }
}

/// Slope tests for every coefficient of a SIMEX lambda curve.
pub fn lambda_flatness(curve: &SimexCurve) -> Result<Vec<Flatness>> {
    if curve.lambdas.len() < 2 {
        return Err(MeError::Precondition("flatness needs at least two grid points".into()));
    }
    let d = curve.estimates[0].len();
    (0..d)
        .map(|t| {
            let v: Vec<f64> = curve.estimates.iter().map(|e| e[t]).collect();
            let s: Vec<f64> = curve.mc_se.iter().map(|e| e[t]).collect();
            curve_flatness(&curve.lambdas, &v, &s)
        })
        .collect()
}
