//! Moment reconstruction for logistic regression.
//!
//! Each subject's combined proxy `x*(alpha)` is mapped to
//! `x_hat = D^{-1}(m_y - eta0) + T_y (x* - m_y)` where `m_y` and `V_y` are
//! the class-wise mean and covariance of `x*(alpha)`, `D = diag(eta1)` and
//! `T_y = S_y^{1/2} V_y^{-1/2}` with `S_y` the target covariance of `X`
//! given the class. Within each class `x_hat` then has the mean and
//! covariance implied for `X`, and a logistic fit on `x_hat` is consistent
//! when `X` is conditionally normal.
//!
//! Only subjects observing every proxy enter the reconstruction; the
//! correction parameters may still use the whole panel.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::calibration::{self, WeightMode};
use crate::correction::Xi;
use crate::data::{Pattern, ProxyPanel};
use crate::error::{MeError, Result};
use crate::linalg;
use crate::outcome::{self, CovKind, Design, Family, FitResult, SolverOptions};
use crate::stacked::StackedSystem;

/// Which covariance of `X` the reconstruction targets within each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetCovariance {
    /// `S_y = D^{-1}(V_y - sum alpha_j^2 M_j)D^{-1}` separately per class.
    #[default]
    ClassSpecific,
    /// The class-frequency weighted average of the two class targets.
    Pooled,
    /// The marginal covariance of `X` from the correction parameters.
    Marginal,
}

impl TargetCovariance {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "class" | "class-specific" => Ok(TargetCovariance::ClassSpecific),
            "pooled" => Ok(TargetCovariance::Pooled),
            "marginal" => Ok(TargetCovariance::Marginal),
            other => Err(MeError::Config(format!("unknown target covariance '{other}'"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            TargetCovariance::ClassSpecific => "class-specific",
            TargetCovariance::Pooled => "pooled",
            TargetCovariance::Marginal => "marginal",
        }
    }
}

/// Class-wise moments of the combined proxy and the quantities built from
/// them. Index 1 is the `y = 1` class, index 0 the `y = 0` class.
#[derive(Debug, Clone)]
pub struct MrParams {
    pub theta1: DVector<f64>,
    pub theta2: DVector<f64>,
    pub theta3: DMatrix<f64>,
    pub theta4: DMatrix<f64>,
    pub eta_dot0: DVector<f64>,
    pub eta_dot1: DVector<f64>,
    /// `sum alpha_j^2 M_j`.
    pub error_floor: DMatrix<f64>,
    /// Targets `S_0`, `S_1`.
    pub target: [DMatrix<f64>; 2],
    pub n_class: [usize; 2],
    pub flags: Vec<String>,
}

impl MrParams {
    fn mean(&self, y: usize) -> &DVector<f64> {
        if y == 1 { &self.theta1 } else { &self.theta2 }
    }

    fn cov(&self, y: usize) -> &DMatrix<f64> {
        if y == 1 { &self.theta3 } else { &self.theta4 }
    }

    /// The affine map `x_hat = a_y + T_y x*` for class `y`.
    pub fn affine(&self, y: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        affine_map(self.mean(y), self.cov(y), &self.target[y], &self.eta_dot0, &self.eta_dot1)
    }
}

fn affine_map(
    m: &DVector<f64>,
    v: &DMatrix<f64>,
    s: &DMatrix<f64>,
    eta0: &DVector<f64>,
    eta1: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let eig = v.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(MeError::Reconstruction(format!(
            "class covariance of the combined proxy is not positive definite (smallest eigenvalue {min:.3e})"
        )));
    }
    if eta1.iter().any(|&e| e == 0.0) {
        return Err(MeError::Reconstruction("combined scale is zero".into()));
    }
    let v_inv_root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()))
        * eig.eigenvectors.transpose();
    let t = linalg::sym_sqrt(s) * v_inv_root;
    let centre = (m - eta0).component_div(eta1);
    let a = centre - &t * m;
    Ok((a, t))
}

/// Rows observing every proxy.
pub fn complete_rows(panel: &ProxyPanel) -> Vec<usize> {
    let full = Pattern::full(panel.k());
    (0..panel.n()).filter(|&i| panel.pattern(i) == full).collect()
}

fn combined(panel: &ProxyPanel, i: usize, alpha: &[f64]) -> DVector<f64> {
    let mut out = vec![0.0; panel.p()];
    panel.combined_proxy(i, alpha, &mut out);
    DVector::from_vec(out)
}

fn class_of(y: f64) -> Result<usize> {
    if y == 1.0 {
        Ok(1)
    } else if y == 0.0 {
        Ok(0)
    } else {
        Err(MeError::Config("moment reconstruction needs a 0/1 outcome".into()))
    }
}

/// Error floor and combined intercepts and scales at weights `alpha`.
fn combined_eta(
    par: &crate::correction::CorrectionParams,
    alpha: &[f64],
) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    let p = par.mu_x.len();
    let mut e0 = DVector::zeros(p);
    let mut e1 = DVector::zeros(p);
    let mut floor = DMatrix::zeros(p, p);
    for (j, &a) in alpha.iter().enumerate() {
        e0 += &par.eta0[j] * a;
        e1 += &par.eta1[j] * a;
        floor += &par.m[j] * (a * a);
    }
    (e0, e1, floor)
}

/// Target covariances for both classes. Returns them with a flag when a
/// class target had to be clipped to the PSD cone.
fn targets(
    choice: TargetCovariance,
    v: [&DMatrix<f64>; 2],
    n_class: [usize; 2],
    floor: &DMatrix<f64>,
    eta1: &DVector<f64>,
    sigma_xx: &DMatrix<f64>,
) -> ([DMatrix<f64>; 2], bool) {
    if choice == TargetCovariance::Marginal {
        let (s, neg) = linalg::clip_psd(sigma_xx);
        return ([s.clone(), s], neg < 0.0);
    }
    let dinv = DMatrix::from_diagonal(&eta1.map(|e| 1.0 / e));
    let mut clipped = false;
    let mut out = [0, 1].map(|y| {
        let (s, neg) = linalg::clip_psd(&(&dinv * (v[y] - floor) * &dinv));
        clipped |= neg < 0.0;
        s
    });
    if choice == TargetCovariance::Pooled {
        let total = (n_class[0] + n_class[1]) as f64;
        let pooled = &out[0] * (n_class[0] as f64 / total) + &out[1] * (n_class[1] as f64 / total);
        out = [pooled.clone(), pooled];
    }
    (out, clipped)
}

/// Class-wise mean and covariance of `x*(alpha)` over the complete rows,
/// together with the reconstruction targets.
pub fn estimate_mr_params(
    panel: &ProxyPanel,
    xi: &Xi,
    alpha: &[f64],
    choice: TargetCovariance,
) -> Result<MrParams> {
    let p = panel.p();
    if alpha.len() != panel.k() {
        return Err(MeError::Config(format!("{} weights for {} proxies", alpha.len(), panel.k())));
    }
    let rows = complete_rows(panel);
    let mut sum = [DVector::zeros(p), DVector::zeros(p)];
    let mut count = [0usize; 2];
    let xs: Vec<(usize, DVector<f64>)> = rows
        .iter()
        .map(|&i| Ok((class_of(panel.y()[i])?, combined(panel, i, alpha))))
        .collect::<Result<_>>()?;
    for (c, x) in &xs {
        sum[*c] += x;
        count[*c] += 1;
    }
    if count[0] < 2 || count[1] < 2 {
        return Err(MeError::Estimation(format!(
            "moment reconstruction needs both outcome classes among complete rows (found {} and {})",
            count[0], count[1]
        )));
    }
    let mean = [0, 1].map(|c| &sum[c] / count[c] as f64);
    let mut cov = [DMatrix::zeros(p, p), DMatrix::zeros(p, p)];
    for (c, x) in &xs {
        let d = x - &mean[*c];
        cov[*c] += &d * d.transpose();
    }
    let cov = [0, 1].map(|c| linalg::symmetrize(&(&cov[c] / count[c] as f64)));
    let (e0, e1, floor) = combined_eta(&xi.params, alpha);
    let (target, clipped) = targets(choice, [&cov[0], &cov[1]], count, &floor, &e1, &xi.params.sigma_xx);
    let mut flags = Vec::new();
    if clipped {
        flags.push("target-covariance-clipped".to_string());
    }
    let [theta4, theta3] = cov;
    let [theta2, theta1] = mean;
    Ok(MrParams {
        theta1,
        theta2,
        theta3,
        theta4,
        eta_dot0: e0,
        eta_dot1: e1,
        error_floor: floor,
        target,
        n_class: count,
        flags,
    })
}

/// Reconstructed covariate for one combined proxy value and outcome.
pub fn mr_reconstruct(xstar: &DVector<f64>, y: f64, mr: &MrParams) -> Result<DVector<f64>> {
    let (a, t) = mr.affine(class_of(y)?)?;
    Ok(a + t * xstar)
}

/// A moment-reconstruction fit with everything the sandwich needs.
#[derive(Debug, Clone)]
pub struct MrFit {
    pub fit: FitResult,
    pub alpha: Vec<f64>,
    pub params: MrParams,
    pub choice: TargetCovariance,
    /// Rows of the panel that were reconstructed.
    pub rows: Vec<usize>,
    /// Reconstructed covariates, one row per entry of `rows`.
    pub xhat: DMatrix<f64>,
}

/// Weights for the combined proxy. Optimal weights minimise the calibration
/// MSE for the complete pattern.
pub fn mr_alpha(xi: &Xi, mode: WeightMode) -> Result<(Vec<f64>, Vec<String>)> {
    let k = xi.raw.k;
    match mode {
        WeightMode::Equal => Ok((vec![1.0 / k as f64; k], Vec::new())),
        WeightMode::Optimal => {
            let s = calibration::optimal_alpha(xi, &[(Pattern::full(k), 1.0)])?;
            let mut flags = Vec::new();
            if s.fallback {
                flags.push("optimal-weights-fell-back-to-equal".to_string());
            }
            Ok((s.alpha, flags))
        }
    }
}

/// Reconstructs the complete rows and fits the logistic model on them.
pub fn fit_mr_logistic(panel: &ProxyPanel, xi: &Xi, alpha: &[f64], choice: TargetCovariance) -> Result<MrFit> {
    let params = estimate_mr_params(panel, xi, alpha, choice)?;
    let rows = complete_rows(panel);
    let maps = [params.affine(0)?, params.affine(1)?];
    let mut xhat = DMatrix::zeros(rows.len(), panel.p());
    for (r, &i) in rows.iter().enumerate() {
        let (a, t) = &maps[class_of(panel.y()[i])?];
        let x = a + t * combined(panel, i, alpha);
        xhat.row_mut(r).copy_from(&x.transpose());
    }
    let y: Vec<f64> = rows.iter().map(|&i| panel.y()[i]).collect();
    let z = panel.z().select_rows(&rows);
    let design = Design::new(&y, &xhat, &z);
    let root = outcome::solve_m(Family::Logistic, &design, None, SolverOptions::default())?;
    let mut fit = FitResult::new("mr", root, panel.n(), panel.p(), panel.q());
    fit.flags = params.flags.clone();
    if rows.len() < panel.n() {
        fit.flags.push(format!("restricted-to-{}-complete-rows", rows.len()));
    }
    fit.config = json!({
        "alpha": alpha,
        "target_covariance": choice.tag(),
        "complete_rows": rows.len(),
        "class_sizes": {"y0": params.n_class[0], "y1": params.n_class[1]},
    });
    Ok(MrFit {
        fit,
        alpha: alpha.to_vec(),
        params,
        choice,
        rows,
        xhat,
    })
}

/// Sandwich covariance of `sqrt(n)(beta_hat - beta)` from the stacked
/// logistic scores, class-moment equations and correction-parameter system.
///
/// Parameters are ordered `beta`, class means (y = 1 then y = 0), packed
/// class covariances (y = 1 then y = 0), then the correction parameters.
/// The weights are held fixed.
pub fn mr_sandwich(panel: &ProxyPanel, xi: &Xi, mr: &MrFit) -> Result<DMatrix<f64>> {
    let (n, p) = (panel.n(), panel.p());
    let theta = &mr.fit.theta;
    let d = theta.len();
    let sl = linalg::sym_len(p);
    let mean_col = |y: usize| d + if y == 1 { 0 } else { p };
    let cov_col = |y: usize| d + 2 * p + if y == 1 { 0 } else { sl };
    let xi_col = d + 2 * p + 2 * sl;
    let dim = xi_col + xi.layout.len();
    let nf = n as f64;
    let mut sys = StackedSystem::new(n, dim);

    let mut v = vec![0.0; dim];
    v[..d].copy_from_slice(theta);
    for y in [1, 0] {
        let pr = &mr.params;
        v[mean_col(y)..mean_col(y) + p].copy_from_slice(pr.mean(y).as_slice());
        let mut packed = Vec::with_capacity(sl);
        linalg::pack_sym(pr.cov(y), &mut packed);
        v[cov_col(y)..cov_col(y) + sl].copy_from_slice(&packed);
    }
    v[xi_col..].copy_from_slice(&xi.to_vec());

    // The affine maps as functions of the class moments and correction
    // parameters, packed (a_0, T_0, a_1, T_1) with T column-major.
    let alpha = &mr.alpha;
    let choice = mr.choice;
    let n_class = mr.params.n_class;
    let map_len = p + p * p;
    let maps = |x: &[f64]| -> DVector<f64> {
        let par = xi.params_from_vec(&x[xi_col..]);
        let (e0, e1, floor) = combined_eta(&par, alpha);
        let m = [0, 1].map(|y| DVector::from_column_slice(&x[mean_col(y)..mean_col(y) + p]));
        let c = [0, 1].map(|y| linalg::unpack_sym(p, &x[cov_col(y)..cov_col(y) + sl]));
        let (s, _) = targets(choice, [&c[0], &c[1]], n_class, &floor, &e1, &par.sigma_xx);
        let mut out = DVector::from_element(2 * map_len, f64::NAN);
        for y in 0..2 {
            if let Ok((a, t)) = affine_map(&m[y], &c[y], &s[y], &e0, &e1) {
                out.rows_mut(y * map_len, p).copy_from(&a);
                out.rows_mut(y * map_len + p, p * p).copy_from_slice(t.as_slice());
            }
        }
        out
    };
    let cols: Vec<usize> = (d..dim).collect();
    let dmap = linalg::numeric_jacobian(maps, &v, &cols, 2 * map_len);
    if dmap.iter().any(|x| !x.is_finite()) {
        return Err(MeError::Inference {
            msg: "reconstruction map is not differentiable at the estimate".into(),
            rank: 0,
            dim,
        });
    }

    // Logistic scores over reconstructed rows, zero elsewhere.
    let mut scores = DMatrix::zeros(n, d);
    let mut jac = DMatrix::zeros(d, dim);
    let mut dpsi_dmap = DMatrix::zeros(d, 2 * map_len);
    let design = Design::new(
        &mr.rows.iter().map(|&i| panel.y()[i]).collect::<Vec<_>>(),
        &mr.xhat,
        &panel.z().select_rows(&mr.rows),
    );
    for (r, &i) in mr.rows.iter().enumerate() {
        let y = panel.y()[i];
        let w: Vec<f64> = design.w.row(r).iter().cloned().collect();
        scores.row_mut(i).copy_from(&outcome::psi(Family::Logistic, y, &w, theta).transpose());
        let mut jt = jac.columns_mut(0, d);
        jt += outcome::psi_jacobian(Family::Logistic, &w, theta);
        let dx = outcome::psi_dx(Family::Logistic, y, &w, theta, p);
        let base = class_of(y)? * map_len;
        let xs = combined(panel, i, alpha);
        let mut da = dpsi_dmap.columns_mut(base, p);
        da += &dx;
        for c in 0..p {
            for rr in 0..p {
                // T is column-major: entry (rr, c) sits at c * p + rr.
                let mut col = dpsi_dmap.column_mut(base + p + c * p + rr);
                col.axpy(xs[c], &dx.column(rr), 1.0);
            }
        }
    }
    let mut chain = jac.columns_mut(d, dim - d);
    chain += &dpsi_dmap * &dmap;
    jac /= nf;
    sys.push("psi", Some(scores), jac)?;

    // Class moments over the reconstructed rows.
    let mut mscores = DMatrix::zeros(n, 2 * p + 2 * sl);
    let mut share = [0.0; 2];
    for &i in &mr.rows {
        let y = class_of(panel.y()[i])?;
        share[y] += 1.0 / nf;
        let x = combined(panel, i, alpha);
        let dev = &x - mr.params.mean(y);
        let off_m = mean_col(y) - d;
        mscores.view_mut((i, off_m), (1, p)).copy_from(&dev.transpose());
        let mut packed = Vec::with_capacity(sl);
        linalg::pack_sym(&(&dev * dev.transpose() - mr.params.cov(y)), &mut packed);
        let off_c = cov_col(y) - d;
        for (t, val) in packed.into_iter().enumerate() {
            mscores[(i, off_c + t)] = val;
        }
    }
    // The covariance rows' derivative in the means is a mean deviation,
    // which vanishes at the estimate.
    let mut mjac = DMatrix::zeros(2 * p + 2 * sl, dim);
    for y in [1, 0] {
        for t in 0..p {
            mjac[(mean_col(y) - d + t, mean_col(y) + t)] = -share[y];
        }
        for t in 0..sl {
            mjac[(cov_col(y) - d + t, cov_col(y) + t)] = -share[y];
        }
    }
    sys.push("class-moments", Some(mscores), mjac)?;
    xi.push_g_block(panel, &mut sys, xi_col)?;
    let full = sys.sandwich()?;
    Ok(full.view((0, 0), (d, d)).into_owned())
}

/// Moment-reconstruction fit with its sandwich covariance attached.
pub fn fit_mr_with_sandwich(panel: &ProxyPanel, xi: &Xi, alpha: &[f64], choice: TargetCovariance) -> Result<MrFit> {
    let mut mr = fit_mr_logistic(panel, xi, alpha, choice)?;
    let cov = mr_sandwich(panel, xi, &mr)?;
    mr.fit = mr.fit.with_cov(&cov, CovKind::Sandwich);
    Ok(mr)
}
