//! Extrapolant families for the lambda curve and their least-squares fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extrapolant {
    /// `a + b lambda`
    Linear,
    /// `a + b lambda + c lambda^2`
    Quadratic,
    /// `a + b / (c + lambda)`
    Nonlinear,
}

impl Extrapolant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Extrapolant::Linear),
            "quadratic" => Ok(Extrapolant::Quadratic),
            "nonlinear" => Ok(Extrapolant::Nonlinear),
            other => Err(MeError::Config(format!("unknown extrapolant '{other}'"))),
        }
    }

    pub fn n_params(self) -> usize {
        match self {
            Extrapolant::Linear => 2,
            Extrapolant::Quadratic | Extrapolant::Nonlinear => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Extrapolant::Linear => "linear",
            Extrapolant::Quadratic => "quadratic",
            Extrapolant::Nonlinear => "nonlinear",
        }
    }
}

/// Fitted extrapolant on one coefficient's lambda curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolantFit {
    pub family: Extrapolant,
    pub gamma: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub residuals: Vec<f64>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl ExtrapolantFit {
    pub fn value(&self, lambda: f64) -> f64 {
        eval(self.family, &self.gamma, lambda)
    }

    /// `dG(lambda)/dGamma`.
    pub fn gradient(&self, lambda: f64) -> Vec<f64> {
        grad(self.family, &self.gamma, lambda)
    }

    /// `G(-1)`. A nonlinear fit with its pole at `-1` cannot be evaluated.
    pub fn extrapolate(&self) -> Result<f64> {
        if self.family == Extrapolant::Nonlinear && (self.gamma[2] - 1.0).abs() <= 1e-6 {
            return Err(MeError::Extrapolation(format!(
                "nonlinear extrapolant has its pole at -1 (c = {})",
                self.gamma[2]
            )));
        }
        let v = self.value(-1.0);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(MeError::Extrapolation("extrapolated value is not finite".into()))
        }
    }

    /// Sensitivity of `G(-1)` to each curve point, `s_{-1}^T (S^T S)^{-1} S^T`,
    /// with `S` the Jacobian of the fitted curve at the grid.
    pub fn influence(&self) -> Result<Vec<f64>> {
        let r = self.lambdas.len();
        let m = self.family.n_params();
        let s = DMatrix::from_fn(r, m, |i, c| self.gradient(self.lambdas[i])[c]);
        let omega = s.transpose() * &s;
        let inv = crate::linalg::try_inverse(&omega).ok_or_else(|| {
            MeError::Extrapolation(format!("{} extrapolant is not locally identified", self.family.tag()))
        })?;
        let g = DVector::from_vec(self.gradient(-1.0));
        let row = g.transpose() * inv * s.transpose();
        Ok(row.iter().cloned().collect())
    }
}

fn eval(family: Extrapolant, g: &[f64], l: f64) -> f64 {
    match family {
        Extrapolant::Linear => g[0] + g[1] * l,
        Extrapolant::Quadratic => g[0] + g[1] * l + g[2] * l * l,
        Extrapolant::Nonlinear => g[0] + g[1] / (g[2] + l),
    }
}

fn grad(family: Extrapolant, g: &[f64], l: f64) -> Vec<f64> {
    match family {
        Extrapolant::Linear => vec![1.0, l],
        Extrapolant::Quadratic => vec![1.0, l, l * l],
        Extrapolant::Nonlinear => {
            let d = g[2] + l;
            vec![1.0, 1.0 / d, -g[1] / (d * d)]
        }
    }
}

fn polynomial(lambdas: &[f64], values: &[f64], degree: usize) -> Result<Vec<f64>> {
    let r = lambdas.len();
    let x = DMatrix::from_fn(r, degree + 1, |i, c| lambdas[i].powi(c as i32));
    let y = DVector::from_column_slice(values);
    let qr = x.clone().qr();
    let rmat = qr.r();
    if (0..=degree).any(|c| rmat[(c, c)].abs() < 1e-12 * (1.0 + rmat[(0, 0)].abs())) {
        return Err(MeError::Precondition("lambda grid does not identify the extrapolant".into()));
    }
    let qty = qr.q().transpose() * y;
    let sol = rmat
        .solve_upper_triangular(&qty)
        .ok_or_else(|| MeError::Precondition("lambda grid does not identify the extrapolant".into()))?;
    Ok(sol.iter().cloned().collect())
}

fn sse(family: Extrapolant, g: &[f64], lambdas: &[f64], values: &[f64]) -> f64 {
    lambdas
        .iter()
        .zip(values)
        .map(|(&l, &v)| {
            let e = v - eval(family, g, l);
            e * e
        })
        .sum()
}

/// Best `(a, b)` for a fixed pole parameter `c`.
fn profile_linear(c: f64, lambdas: &[f64], values: &[f64]) -> Option<[f64; 3]> {
    let r = lambdas.len() as f64;
    let u: Vec<f64> = lambdas.iter().map(|l| 1.0 / (c + l)).collect();
    let mu = u.iter().sum::<f64>() / r;
    let mv = values.iter().sum::<f64>() / r;
    let suu: f64 = u.iter().map(|x| (x - mu) * (x - mu)).sum();
    if suu <= 0.0 || !suu.is_finite() {
        return None;
    }
    let suv: f64 = u.iter().zip(values).map(|(x, v)| (x - mu) * (v - mv)).sum();
    let b = suv / suu;
    Some([mv - b * mu, b, c])
}

/// Levenberg-Marquardt on `a + b/(c + lambda)`, keeping `c + lambda > 0` on
/// the grid.
fn levenberg_marquardt(start: [f64; 3], lambdas: &[f64], values: &[f64]) -> Option<([f64; 3], f64)> {
    let lmin = lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = values.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    let mut g = start;
    let mut f = sse(Extrapolant::Nonlinear, &g, lambdas, values);
    let mut damping = 1e-3;
    for _ in 0..500 {
        let r = lambdas.len();
        let jac = DMatrix::from_fn(r, 3, |i, c| grad(Extrapolant::Nonlinear, &g, lambdas[i])[c]);
        let res = DVector::from_fn(r, |i, _| values[i] - eval(Extrapolant::Nonlinear, &g, lambdas[i]));
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        if jtr.amax() <= 1e-15 * (1.0 + scale.sqrt()) {
            return Some((g, f));
        }
        let mut improved = false;
        for _ in 0..60 {
            let mut lhs = jtj.clone();
            for d in 0..3 {
                lhs[(d, d)] += damping * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = crate::linalg::solve(&lhs, &jtr) else {
                damping *= 10.0;
                continue;
            };
            let cand = [g[0] + step[0], g[1] + step[1], g[2] + step[2]];
            if cand[2] + lmin <= 1e-10 || cand.iter().any(|v| !v.is_finite()) {
                damping *= 10.0;
                continue;
            }
            let fc = sse(Extrapolant::Nonlinear, &cand, lambdas, values);
            if fc <= f {
                let rel = step.amax() / (1.0 + g.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
                let done = f - fc <= 1e-30 * scale || rel < 1e-15;
                g = cand;
                f = fc;
                damping = (damping / 3.0).max(1e-15);
                improved = true;
                if done {
                    return Some((g, f));
                }
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            // No descent direction left at machine precision.
            return Some((g, f));
        }
    }
    Some((g, f))
}

/// Least-squares fit of `family` to the curve `(lambdas, values)`.
pub fn fit_extrapolant(lambdas: &[f64], values: &[f64], family: Extrapolant) -> Result<ExtrapolantFit> {
    if lambdas.len() != values.len() {
        return Err(MeError::Precondition("lambda grid and estimates differ in length".into()));
    }
    if lambdas.len() < family.n_params() {
        return Err(MeError::Precondition(format!(
            "{} extrapolant needs at least {} grid points, got {}",
            family.tag(),
            family.n_params(),
            lambdas.len()
        )));
    }
    let gamma = match family {
        Extrapolant::Linear => polynomial(lambdas, values, 1)?,
        Extrapolant::Quadratic => polynomial(lambdas, values, 2)?,
        Extrapolant::Nonlinear => fit_nonlinear(lambdas, values)?,
    };
    let residuals = lambdas
        .iter()
        .zip(values)
        .map(|(&l, &v)| v - eval(family, &gamma, l))
        .collect();
    Ok(ExtrapolantFit {
        family,
        gamma,
        lambdas: lambdas.to_vec(),
        residuals,
        flags: Vec::new(),
    })
}

fn fit_nonlinear(lambdas: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    let lmax = lambdas.iter().cloned().fold(0.0_f64, f64::max).max(1e-8);
    let mut best: Option<([f64; 3], f64)> = None;
    for mult in [0.5, 1.0, 2.0, 4.0] {
        let Some(start) = profile_linear(mult * lmax, lambdas, values) else {
            continue;
        };
        if let Some((g, f)) = levenberg_marquardt(start, lambdas, values) {
            let sane = g.iter().all(|v| v.is_finite()) && g[2].abs() < 1e6 * lmax;
            if sane && best.is_none_or(|(_, bf)| f < bf) {
                best = Some((g, f));
            }
        }
    }
    let (g, _) = best.ok_or_else(|| MeError::Extrapolation("nonlinear extrapolant did not converge".into()))?;
    // A vanishing b leaves c unidentified.
    let level = values.iter().map(|v| v.abs()).fold(0.0_f64, f64::max);
    if g[1].abs() <= 1e-12 * (1.0 + level) {
        return Err(MeError::Extrapolation("nonlinear extrapolant is degenerate on a flat curve".into()));
    }
    Ok(g.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

    #[test]
    fn closed_form_extrapolation() {
        let lin = ExtrapolantFit {
            family: Extrapolant::Linear,
            gamma: vec![3.0, 0.5],
            lambdas: vec![],
            residuals: vec![],
            flags: vec![],
        };
        assert_eq!(lin.extrapolate().unwrap(), 2.5);
        let quad = ExtrapolantFit {
            family: Extrapolant::Quadratic,
            gamma: vec![1.0, 2.0, 3.0],
            ..lin.clone()
        };
        assert_eq!(quad.extrapolate().unwrap(), 2.0);
        let nl = ExtrapolantFit {
            family: Extrapolant::Nonlinear,
            gamma: vec![1.0, 2.0, 3.0],
            ..lin
        };
        assert_eq!(nl.extrapolate().unwrap(), 2.0);
    }

    #[test]
    fn quadratic_interpolates_exactly() {
        let v: Vec<f64> = GRID.iter().map(|l| 0.3 - 1.2 * l + 0.7 * l * l).collect();
        let f = fit_extrapolant(&GRID, &v, Extrapolant::Quadratic).unwrap();
        for (a, b) in f.gamma.iter().zip([0.3, -1.2, 0.7]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn nonlinear_recovers_generating_curve() {
        let v: Vec<f64> = GRID.iter().map(|l| 1.0 + 2.0 / (1.0 + l)).collect();
        let f = fit_extrapolant(&GRID, &v, Extrapolant::Nonlinear).unwrap();
        for (a, b) in f.gamma.iter().zip([1.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-6, "{:?}", f.gamma);
        }
        assert!(f.extrapolate().is_err());
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            fit_extrapolant(&[0.0, 1.0], &[1.0, 2.0], Extrapolant::Quadratic),
            Err(MeError::Precondition(_))
        ));
    }

    #[test]
    fn influence_of_linear_fit_sums_to_one() {
        let v: Vec<f64> = GRID.iter().map(|l| 2.0 - l).collect();
        let f = fit_extrapolant(&GRID, &v, Extrapolant::Linear).unwrap();
        let w = f.influence().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let direct: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((direct - f.extrapolate().unwrap()).abs() < 1e-12);
    }
}
