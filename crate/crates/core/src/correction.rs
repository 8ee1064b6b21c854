//! Proxy moments, identification of the error-model parameters and their
//! joint estimating equations.
//!
//! The parameter vector `xi` stacks the raw moments (`zeta`: proxy means,
//! pairwise proxy covariances, and the covariate moments when covariates
//! take part in identification) followed by the derived parameters
//! (`mu_x`, `sigma_xx`, `eta0_j`, `eta1_j`, `M_j`, `sigma_xxj`, `sigma_zx`).
//! The raw rows of `g` are per-subject moment residuals gated by the
//! observation mask; the derived rows are `identify(zeta) - psi`, constant
//! across subjects.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::data::{ErrorModelSpec, ProxyPanel};
use crate::error::{MeError, Result};
use crate::linalg::{self, CompensatedSum};
use crate::stacked::StackedSystem;

/// Sample moments of the proxies and covariates.
///
/// `sigma[j][l]` is `cov(X*_j, X*_l)` over subjects observing both, centred
/// on each proxy's own mean and divided by the pair count. `sigma_zj[j]` is
/// `cov(Z, X*_j)` (`q x p`).
#[derive(Debug, Clone, PartialEq)]
pub struct RawMoments {
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub n: usize,
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<Vec<DMatrix<f64>>>,
    pub mu_z: DVector<f64>,
    pub sigma_zz: DMatrix<f64>,
    pub sigma_zj: Vec<DMatrix<f64>>,
    pub n_j: Vec<usize>,
    pub n_jl: Vec<Vec<usize>>,
}

/// Estimates proxy means and pairwise-complete covariances.
pub fn estimate_raw_moments(panel: &ProxyPanel) -> Result<RawMoments> {
    let (n, k, p, q) = (panel.n(), panel.k(), panel.p(), panel.q());
    let mut n_j = vec![0usize; k];
    let mut n_jl = vec![vec![0usize; k]; k];
    for i in 0..n {
        for j in 0..k {
            if panel.observed(i, j) {
                n_j[j] += 1;
                for l in j..k {
                    if panel.observed(i, l) {
                        n_jl[j][l] += 1;
                    }
                }
            }
        }
    }
    for j in 0..k {
        for l in j..k {
            if n_jl[j][l] < 2 {
                return Err(MeError::NotCoObserved(j + 1, l + 1));
            }
            n_jl[l][j] = n_jl[j][l];
        }
    }

    let mut mu = Vec::with_capacity(k);
    for j in 0..k {
        let mut s = vec![CompensatedSum::default(); p];
        for i in 0..n {
            if panel.observed(i, j) {
                for (c, acc) in s.iter_mut().enumerate() {
                    acc.add(panel.value(i, j, c));
                }
            }
        }
        mu.push(DVector::from_iterator(p, s.iter().map(|a| a.value() / n_j[j] as f64)));
    }
    let z = panel.z();
    let mu_z = DVector::from_fn(q, |c, _| {
        let mut s = CompensatedSum::default();
        for i in 0..n {
            s.add(z[(i, c)]);
        }
        s.value() / n as f64
    });

    let mut sigma = vec![vec![DMatrix::zeros(p, p); k]; k];
    let mut dj = vec![0.0; p];
    let mut dl = vec![0.0; p];
    for j in 0..k {
        for l in j..k {
            let mut acc = vec![CompensatedSum::default(); p * p];
            for i in 0..n {
                if panel.observed(i, j) && panel.observed(i, l) {
                    for c in 0..p {
                        dj[c] = panel.value(i, j, c) - mu[j][c];
                        dl[c] = panel.value(i, l, c) - mu[l][c];
                    }
                    for a in 0..p {
                        for b in 0..p {
                            acc[a * p + b].add(dj[a] * dl[b]);
                        }
                    }
                }
            }
            let m = DMatrix::from_fn(p, p, |a, b| acc[a * p + b].value() / n_jl[j][l] as f64);
            let m = if j == l { linalg::symmetrize(&m) } else { m };
            sigma[l][j] = m.transpose();
            sigma[j][l] = m;
        }
    }

    let mut sigma_zz = DMatrix::zeros(q, q);
    let mut sigma_zj = vec![DMatrix::zeros(q, p); k];
    if q > 0 {
        let mut acc = vec![CompensatedSum::default(); q * q];
        for i in 0..n {
            for a in 0..q {
                for b in 0..q {
                    acc[a * q + b].add((z[(i, a)] - mu_z[a]) * (z[(i, b)] - mu_z[b]));
                }
            }
        }
        sigma_zz = linalg::symmetrize(&DMatrix::from_fn(q, q, |a, b| acc[a * q + b].value() / n as f64));
        for j in 0..k {
            let mut acc = vec![CompensatedSum::default(); q * p];
            for i in 0..n {
                if panel.observed(i, j) {
                    for a in 0..q {
                        let dz = z[(i, a)] - mu_z[a];
                        for b in 0..p {
                            acc[a * p + b].add(dz * (panel.value(i, j, b) - mu[j][b]));
                        }
                    }
                }
            }
            sigma_zj[j] = DMatrix::from_fn(q, p, |a, b| acc[a * p + b].value() / n_j[j] as f64);
        }
    }
    Ok(RawMoments {
        k,
        p,
        q,
        n,
        mu,
        sigma,
        mu_z,
        sigma_zz,
        sigma_zj,
        n_j,
        n_jl,
    })
}

/// Identified error-model parameters.
///
/// `eta1[j]` holds the diagonal of the scale matrix. `sigma_xxj[j]` is
/// `cov(X, X*_j)` and `sigma_zx` is `cov(Z, X)` (`q x p`, empty when
/// covariates were not used). `clipped[j]` is the magnitude of the most
/// negative eigenvalue removed from `M_j` (0 when none).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionParams {
    pub mu_x: DVector<f64>,
    pub sigma_xx: DMatrix<f64>,
    pub eta0: Vec<DVector<f64>>,
    pub eta1: Vec<DVector<f64>>,
    pub m: Vec<DMatrix<f64>>,
    pub sigma_xxj: Vec<DMatrix<f64>>,
    pub sigma_zx: DMatrix<f64>,
    pub alpha: Vec<f64>,
    pub clipped: Vec<f64>,
}

fn diag_inv(d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&d.map(|v| 1.0 / v))
}

/// Moments of the working proxies `D^{-1}(X*_j - c)` where `c` and `D` are the
/// known intercept and scale (zero and identity when not supplied).
fn working_moments(raw: &RawMoments, spec: &ErrorModelSpec) -> (RawMoments, Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let p = raw.p;
    let shift: Vec<DVector<f64>> = spec
        .proxies
        .iter()
        .map(|s| s.eta0.as_ref().map_or(DVector::zeros(p), |v| DVector::from_column_slice(v)))
        .collect();
    let scale: Vec<DVector<f64>> = spec
        .proxies
        .iter()
        .map(|s| s.eta1.as_ref().map_or(DVector::from_element(p, 1.0), |v| DVector::from_column_slice(v)))
        .collect();
    if spec.proxies.iter().all(|s| s.eta0.is_none() && s.eta1.is_none()) {
        return (raw.clone(), shift, scale);
    }
    let mut w = raw.clone();
    for j in 0..raw.k {
        let dinv = diag_inv(&scale[j]);
        w.mu[j] = &dinv * (&raw.mu[j] - &shift[j]);
        for l in 0..raw.k {
            w.sigma[j][l] = &dinv * &raw.sigma[j][l] * diag_inv(&scale[l]);
        }
        w.sigma_zj[j] = &raw.sigma_zj[j] * &dinv;
    }
    (w, shift, scale)
}

struct Core {
    mu_x: DVector<f64>,
    sigma_xx: DMatrix<f64>,
    eta0: Vec<DVector<f64>>,
    eta1: Vec<DVector<f64>>,
    sigma_xxj: Vec<DMatrix<f64>>,
    sigma_zx: DMatrix<f64>,
}

fn identify_core(raw: &RawMoments, j0: &[bool], j1: &[bool], has_z: bool) -> Result<Core> {
    let (k, p) = (raw.k, raw.p);
    let ones = DVector::from_element(p, 1.0);
    let mut eta1 = vec![ones.clone(); k];
    let mut sigma_xxj = vec![DMatrix::zeros(p, p); k];
    let mut sigma_zx = DMatrix::zeros(0, p);

    if !has_z {
        for j in 0..k {
            let partners: Vec<usize> = (0..k).filter(|&l| l != j && j1[l]).collect();
            if partners.is_empty() {
                return Err(MeError::Identification(format!(
                    "proxy {} has no other proxy with known scale",
                    j + 1
                )));
            }
            let mut acc = DMatrix::zeros(p, p);
            for &l in &partners {
                acc += &raw.sigma[l][j];
            }
            sigma_xxj[j] = acc / partners.len() as f64;
        }
        let mut inv = Vec::with_capacity(k);
        for (l, s) in sigma_xxj.iter().enumerate() {
            inv.push(linalg::try_inverse(s).ok_or_else(|| {
                MeError::Identification(format!("cov(X, X*_{}) is singular", l + 1))
            })?);
        }
        for j in 0..k {
            if j1[j] {
                continue;
            }
            let mut acc = DMatrix::zeros(p, p);
            for l in (0..k).filter(|&l| l != j) {
                acc += &raw.sigma[j][l] * &inv[l];
            }
            acc /= (k - 1) as f64;
            eta1[j] = acc.diagonal();
        }
    } else {
        let members: Vec<usize> = (0..k).filter(|&j| j1[j]).collect();
        if members.is_empty() {
            return Err(MeError::Identification("no proxy with known scale".into()));
        }
        let mut acc = DMatrix::zeros(raw.q, p);
        for &j in &members {
            acc += &raw.sigma_zj[j];
        }
        sigma_zx = acc / members.len() as f64;
        let den: Vec<f64> = (0..p).map(|c| sigma_zx.column(c).norm_squared()).collect();
        for j in 0..k {
            if j1[j] {
                continue;
            }
            let mut e = DVector::zeros(p);
            for c in 0..p {
                let scale = raw.sigma[j][j][(c, c)].abs().max(1e-300) * raw.sigma_zz.trace().abs().max(1e-300);
                if den[c] <= 1e-14 * scale {
                    return Err(MeError::Identification(
                        "cov(X, Z) cov(Z, X) is singular".into(),
                    ));
                }
                let num = raw.sigma_zj[j].column(c).norm_squared();
                let ratio = num / den[c];
                if ratio < 0.0 {
                    return Err(MeError::ModelViolation("negative value under square root".into()));
                }
                e[c] = ratio.sqrt();
            }
            eta1[j] = e;
        }
        for j in 0..k {
            let mut acc = DMatrix::zeros(p, p);
            for l in (0..k).filter(|&l| l != j) {
                acc += diag_inv(&eta1[l]) * &raw.sigma[l][j];
            }
            sigma_xxj[j] = acc / (k - 1) as f64;
        }
    }
    for (j, e) in eta1.iter().enumerate() {
        if e.iter().any(|&v| !(v > 0.0)) {
            return Err(MeError::ModelViolation(format!(
                "estimated scale of proxy {} is not positive",
                j + 1
            )));
        }
    }

    let mut acc = DMatrix::zeros(p, p);
    for j in 0..k {
        acc += &sigma_xxj[j] * diag_inv(&eta1[j]);
    }
    let sigma_xx = linalg::symmetrize(&(acc / k as f64));

    let members: Vec<usize> = (0..k).filter(|&j| j0[j]).collect();
    if members.is_empty() {
        return Err(MeError::Identification("no proxy with known intercept".into()));
    }
    let mut acc = DVector::zeros(p);
    for &j in &members {
        if j1[j] {
            acc += &raw.mu[j];
        } else {
            acc += diag_inv(&eta1[j]) * &raw.mu[j];
        }
    }
    let mu_x = acc / members.len() as f64;

    let eta0 = (0..k)
        .map(|j| {
            if j0[j] {
                DVector::zeros(p)
            } else {
                &raw.mu[j] - eta1[j].component_mul(&mu_x)
            }
        })
        .collect();

    Ok(Core {
        mu_x,
        sigma_xx,
        eta0,
        eta1,
        sigma_xxj,
        sigma_zx,
    })
}

/// Identifies the error-model parameters from proxy moments.
///
/// Known intercepts and scales in `spec` are handled by identifying the
/// working proxies `D^{-1}(X*_j - c)` and mapping the result back.
pub fn identify(raw: &RawMoments, spec: &ErrorModelSpec, has_z: bool) -> Result<CorrectionParams> {
    let has_z = has_z && raw.q > 0;
    if spec.k() != raw.k {
        return Err(MeError::Config(format!(
            "spec describes {} proxies but the panel has {}",
            spec.k(),
            raw.k
        )));
    }
    spec.validate(raw.p, has_z)?;
    let (work, shift, scale) = working_moments(raw, spec);
    let j0: Vec<bool> = (0..raw.k).map(|j| spec.in_j0(j)).collect();
    let j1: Vec<bool> = (0..raw.k).map(|j| spec.in_j1(j)).collect();
    let core = identify_core(&work, &j0, &j1, has_z)?;

    let k = raw.k;
    let mut eta0 = Vec::with_capacity(k);
    let mut eta1 = Vec::with_capacity(k);
    let mut m = Vec::with_capacity(k);
    let mut sigma_xxj = Vec::with_capacity(k);
    let mut clipped = Vec::with_capacity(k);
    for j in 0..k {
        let d = DMatrix::from_diagonal(&scale[j]);
        let e0 = if spec.proxies[j].in_j0 && spec.proxies[j].eta0.is_none() {
            DVector::zeros(raw.p)
        } else {
            &shift[j] + &d * &core.eta0[j]
        };
        let e1 = if spec.proxies[j].in_j1 && spec.proxies[j].eta1.is_none() {
            DVector::from_element(raw.p, 1.0)
        } else {
            scale[j].component_mul(&core.eta1[j])
        };
        let de1 = DMatrix::from_diagonal(&e1);
        let raw_m = &raw.sigma[j][j] - &de1 * &core.sigma_xx * &de1;
        let (mc, min_eig) = linalg::clip_psd(&raw_m);
        let scale_tr = raw.sigma[j][j].trace().abs();
        if min_eig < -0.1 * scale_tr {
            return Err(MeError::ModelViolation(format!(
                "error covariance of proxy {} has eigenvalue {min_eig:.4} (proxy variance trace {scale_tr:.4})",
                j + 1
            )));
        }
        clipped.push(-min_eig.min(0.0));
        eta0.push(e0);
        eta1.push(e1);
        m.push(mc);
        sigma_xxj.push(&core.sigma_xxj[j] * &d);
    }
    let sigma_zx = if has_z {
        core.sigma_zx
    } else {
        DMatrix::zeros(0, raw.p)
    };
    Ok(CorrectionParams {
        mu_x: core.mu_x,
        sigma_xx: core.sigma_xx,
        eta0,
        eta1,
        m,
        sigma_xxj,
        sigma_zx,
        alpha: vec![1.0 / k as f64; k],
        clipped,
    })
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

impl CorrectionParams {
    pub fn k(&self) -> usize {
        self.eta0.len()
    }

    pub fn p(&self) -> usize {
        self.mu_x.len()
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "mu_x": self.mu_x.as_slice(),
            "sigma_xx": mat_rows(&self.sigma_xx),
            "eta0": self.eta0.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>(),
            "eta1": self.eta1.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>(),
            "m_j": self.m.iter().map(mat_rows).collect::<Vec<_>>(),
            "sigma_xxj": self.sigma_xxj.iter().map(mat_rows).collect::<Vec<_>>(),
            "sigma_zx": mat_rows(&self.sigma_zx),
            "alpha": self.alpha,
            "clipped": self.clipped,
        })
    }
}

/// Offsets of each component inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XiLayout {
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub has_z: bool,
    mu: Vec<usize>,
    sigma: Vec<Vec<usize>>,
    mu_z: usize,
    sigma_zz: usize,
    sigma_zj: Vec<usize>,
    raw_len: usize,
    mu_x: usize,
    sigma_xx: usize,
    eta0: Vec<usize>,
    eta1: Vec<usize>,
    m: Vec<usize>,
    sigma_xxj: Vec<usize>,
    sigma_zx: usize,
    len: usize,
}

impl XiLayout {
    pub fn new(k: usize, p: usize, q: usize, has_z: bool) -> Self {
        let q = if has_z { q } else { 0 };
        let has_z = has_z && q > 0;
        let sp = linalg::sym_len(p);
        let mut at = 0;
        let mut take = |len: usize| {
            let o = at;
            at += len;
            o
        };
        let mu = (0..k).map(|_| take(p)).collect();
        let mut sigma = vec![vec![0; k]; k];
        for (j, row) in sigma.iter_mut().enumerate() {
            for (l, slot) in row.iter_mut().enumerate().skip(j) {
                *slot = take(if l == j { sp } else { p * p });
            }
        }
        let mu_z = take(q);
        let sigma_zz = take(linalg::sym_len(q));
        let sigma_zj = (0..k).map(|_| take(q * p)).collect();
        let raw_len = take(0);
        let mu_x = take(p);
        let sigma_xx = take(sp);
        let eta0 = (0..k).map(|_| take(p)).collect();
        let eta1 = (0..k).map(|_| take(p)).collect();
        let m = (0..k).map(|_| take(sp)).collect();
        let sigma_xxj = (0..k).map(|_| take(p * p)).collect();
        let sigma_zx = take(q * p);
        let len = take(0);
        XiLayout {
            k,
            p,
            q,
            has_z,
            mu,
            sigma,
            mu_z,
            sigma_zz,
            sigma_zj,
            raw_len,
            mu_x,
            sigma_xx,
            eta0,
            eta1,
            m,
            sigma_xxj,
            sigma_zx,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of raw-moment coordinates, which come first.
    pub fn raw_len(&self) -> usize {
        self.raw_len
    }

    pub fn mu(&self, j: usize) -> Range<usize> {
        self.mu[j]..self.mu[j] + self.p
    }

    /// Range of `cov(X*_j, X*_l)`; for `j > l` the stored block is the
    /// transpose `(l, j)`.
    pub fn sigma(&self, j: usize, l: usize) -> Range<usize> {
        let (a, b) = if j <= l { (j, l) } else { (l, j) };
        let len = if a == b { linalg::sym_len(self.p) } else { self.p * self.p };
        self.sigma[a][b]..self.sigma[a][b] + len
    }

    pub fn mu_z(&self) -> Range<usize> {
        self.mu_z..self.mu_z + self.q
    }

    pub fn sigma_zz(&self) -> Range<usize> {
        self.sigma_zz..self.sigma_zz + linalg::sym_len(self.q)
    }

    pub fn sigma_zj(&self, j: usize) -> Range<usize> {
        self.sigma_zj[j]..self.sigma_zj[j] + self.q * self.p
    }

    pub fn mu_x(&self) -> Range<usize> {
        self.mu_x..self.mu_x + self.p
    }

    pub fn sigma_xx(&self) -> Range<usize> {
        self.sigma_xx..self.sigma_xx + linalg::sym_len(self.p)
    }

    pub fn eta0(&self, j: usize) -> Range<usize> {
        self.eta0[j]..self.eta0[j] + self.p
    }

    pub fn eta1(&self, j: usize) -> Range<usize> {
        self.eta1[j]..self.eta1[j] + self.p
    }

    pub fn m(&self, j: usize) -> Range<usize> {
        self.m[j]..self.m[j] + linalg::sym_len(self.p)
    }

    pub fn sigma_xxj(&self, j: usize) -> Range<usize> {
        self.sigma_xxj[j]..self.sigma_xxj[j] + self.p * self.p
    }

    pub fn sigma_zx(&self) -> Range<usize> {
        self.sigma_zx..self.sigma_zx + self.q * self.p
    }

    /// Human-readable label for each coordinate.
    pub fn labels(&self) -> Vec<String> {
        let mut out = vec![String::new(); self.len];
        let mut put = |r: Range<usize>, name: String| {
            for (t, idx) in r.enumerate() {
                out[idx] = format!("{name}[{t}]");
            }
        };
        for j in 0..self.k {
            put(self.mu(j), format!("mu_{}", j + 1));
            for l in j..self.k {
                put(self.sigma(j, l), format!("sigma_{}{}", j + 1, l + 1));
            }
        }
        if self.has_z {
            put(self.mu_z(), "mu_z".into());
            put(self.sigma_zz(), "sigma_zz".into());
            for j in 0..self.k {
                put(self.sigma_zj(j), format!("sigma_z{}", j + 1));
            }
        }
        put(self.mu_x(), "mu_x".into());
        put(self.sigma_xx(), "sigma_xx".into());
        for j in 0..self.k {
            put(self.eta0(j), format!("eta0_{}", j + 1));
            put(self.eta1(j), format!("eta1_{}", j + 1));
            put(self.m(j), format!("m_{}", j + 1));
            put(self.sigma_xxj(j), format!("sigma_xx{}", j + 1));
        }
        if self.has_z {
            put(self.sigma_zx(), "sigma_zx".into());
        }
        out
    }
}

/// Estimated raw moments and parameters together with the assumptions
/// used to identify them.
#[derive(Debug, Clone)]
pub struct Xi {
    pub raw: RawMoments,
    pub params: CorrectionParams,
    pub spec: ErrorModelSpec,
    pub has_z: bool,
    pub layout: XiLayout,
}

impl Xi {
    pub fn estimate(panel: &ProxyPanel, spec: &ErrorModelSpec, has_z: bool) -> Result<Xi> {
        let raw = estimate_raw_moments(panel)?;
        Self::from_raw(raw, spec, has_z)
    }

    pub fn from_raw(raw: RawMoments, spec: &ErrorModelSpec, has_z: bool) -> Result<Xi> {
        let has_z = has_z && raw.q > 0;
        let params = identify(&raw, spec, has_z)?;
        let layout = XiLayout::new(raw.k, raw.p, raw.q, has_z);
        Ok(Xi {
            raw,
            params,
            spec: spec.clone(),
            has_z,
            layout,
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let l = &self.layout;
        let (raw, par) = (&self.raw, &self.params);
        let mut v = Vec::with_capacity(l.len());
        for j in 0..l.k {
            v.extend(raw.mu[j].iter());
        }
        for j in 0..l.k {
            for jj in j..l.k {
                if jj == j {
                    linalg::pack_sym(&raw.sigma[j][j], &mut v);
                } else {
                    linalg::pack_full(&raw.sigma[j][jj], &mut v);
                }
            }
        }
        if l.has_z {
            v.extend(raw.mu_z.iter());
            linalg::pack_sym(&raw.sigma_zz, &mut v);
            for j in 0..l.k {
                linalg::pack_full(&raw.sigma_zj[j], &mut v);
            }
        }
        v.extend(par.mu_x.iter());
        linalg::pack_sym(&par.sigma_xx, &mut v);
        for j in 0..l.k {
            v.extend(par.eta0[j].iter());
        }
        for j in 0..l.k {
            v.extend(par.eta1[j].iter());
        }
        for j in 0..l.k {
            linalg::pack_sym(&par.m[j], &mut v);
        }
        for j in 0..l.k {
            linalg::pack_full(&par.sigma_xxj[j], &mut v);
        }
        if l.has_z {
            linalg::pack_full(&par.sigma_zx, &mut v);
        }
        debug_assert_eq!(v.len(), l.len());
        v
    }

    /// Raw moments encoded in `v`, with counts taken from `self`.
    pub fn raw_from_vec(&self, v: &[f64]) -> RawMoments {
        let l = &self.layout;
        let (k, p) = (l.k, l.p);
        let mut raw = self.raw.clone();
        for j in 0..k {
            raw.mu[j] = DVector::from_column_slice(&v[l.mu(j)]);
            for jj in j..k {
                let r = l.sigma(j, jj);
                let m = if jj == j {
                    linalg::unpack_sym(p, &v[r])
                } else {
                    linalg::unpack_full(p, p, &v[r])
                };
                raw.sigma[jj][j] = m.transpose();
                raw.sigma[j][jj] = m;
            }
        }
        if l.has_z {
            raw.mu_z = DVector::from_column_slice(&v[l.mu_z()]);
            raw.sigma_zz = linalg::unpack_sym(l.q, &v[l.sigma_zz()]);
            for j in 0..k {
                raw.sigma_zj[j] = linalg::unpack_full(l.q, p, &v[l.sigma_zj(j)]);
            }
        }
        raw
    }

    /// Derived parameters encoded in `v`.
    pub fn params_from_vec(&self, v: &[f64]) -> CorrectionParams {
        let l = &self.layout;
        let (k, p) = (l.k, l.p);
        CorrectionParams {
            mu_x: DVector::from_column_slice(&v[l.mu_x()]),
            sigma_xx: linalg::unpack_sym(p, &v[l.sigma_xx()]),
            eta0: (0..k).map(|j| DVector::from_column_slice(&v[l.eta0(j)])).collect(),
            eta1: (0..k).map(|j| DVector::from_column_slice(&v[l.eta1(j)])).collect(),
            m: (0..k).map(|j| linalg::unpack_sym(p, &v[l.m(j)])).collect(),
            sigma_xxj: (0..k).map(|j| linalg::unpack_full(p, p, &v[l.sigma_xxj(j)])).collect(),
            sigma_zx: if l.has_z {
                linalg::unpack_full(l.q, p, &v[l.sigma_zx()])
            } else {
                DMatrix::zeros(0, p)
            },
            alpha: self.params.alpha.clone(),
            clipped: self.params.clipped.clone(),
        }
    }

    /// Derived parameters implied by the raw part of `v`, packed like the
    /// derived part of the layout.
    fn derived_from_raw(&self, v: &[f64]) -> Result<Vec<f64>> {
        let raw = self.raw_from_vec(v);
        let params = identify(&raw, &self.spec, self.has_z)?;
        let tmp = Xi {
            raw,
            params,
            spec: self.spec.clone(),
            has_z: self.has_z,
            layout: self.layout.clone(),
        };
        Ok(tmp.to_vec()[self.layout.raw_len()..].to_vec())
    }

    /// Per-subject raw-moment residuals at `v` (`n x raw_len`).
    pub fn raw_scores(&self, panel: &ProxyPanel, v: &[f64]) -> DMatrix<f64> {
        let l = &self.layout;
        let n = panel.n();
        let mut out = DMatrix::zeros(n, l.raw_len());
        let mut row = vec![0.0; l.raw_len()];
        for i in 0..n {
            self.raw_residual_into(panel, i, v, &mut row);
            for (c, val) in row.iter().enumerate() {
                out[(i, c)] = *val;
            }
        }
        out
    }

    fn raw_residual_into(&self, panel: &ProxyPanel, i: usize, v: &[f64], out: &mut [f64]) {
        let l = &self.layout;
        let (k, p, q) = (l.k, l.p, l.q);
        out.iter_mut().for_each(|x| *x = 0.0);
        let dev: Vec<Vec<f64>> = (0..k)
            .map(|j| {
                let mu = &v[l.mu(j)];
                (0..p).map(|c| panel.value(i, j, c) - mu[c]).collect()
            })
            .collect();
        for j in 0..k {
            if !panel.observed(i, j) {
                continue;
            }
            for (t, idx) in l.mu(j).enumerate() {
                out[idx] = dev[j][t];
            }
            for jj in j..k {
                if !panel.observed(i, jj) {
                    continue;
                }
                let r = l.sigma(j, jj);
                if jj == j {
                    let mut t = r.start;
                    for a in 0..p {
                        for b in a..p {
                            out[t] = dev[j][a] * dev[j][b] - v[t];
                            t += 1;
                        }
                    }
                } else {
                    let mut t = r.start;
                    for a in 0..p {
                        for b in 0..p {
                            out[t] = dev[j][a] * dev[jj][b] - v[t];
                            t += 1;
                        }
                    }
                }
            }
        }
        if l.has_z {
            let z = panel.z();
            let mz = &v[l.mu_z()];
            let dz: Vec<f64> = (0..q).map(|c| z[(i, c)] - mz[c]).collect();
            for (t, idx) in l.mu_z().enumerate() {
                out[idx] = dz[t];
            }
            let mut t = l.sigma_zz().start;
            for a in 0..q {
                for b in a..q {
                    out[t] = dz[a] * dz[b] - v[t];
                    t += 1;
                }
            }
            for j in 0..k {
                if !panel.observed(i, j) {
                    continue;
                }
                let mut t = l.sigma_zj(j).start;
                for a in 0..q {
                    for b in 0..p {
                        out[t] = dz[a] * dev[j][b] - v[t];
                        t += 1;
                    }
                }
            }
        }
    }

    /// Stacked residual `g` for subject `i` at parameter vector `v`.
    pub fn g_residual(&self, panel: &ProxyPanel, i: usize, v: &[f64]) -> Result<DVector<f64>> {
        let l = &self.layout;
        let mut out = vec![0.0; l.len()];
        self.raw_residual_into(panel, i, v, &mut out[..l.raw_len()]);
        let derived = self.derived_from_raw(v)?;
        for (t, d) in derived.iter().enumerate() {
            out[l.raw_len() + t] = d - v[l.raw_len() + t];
        }
        Ok(DVector::from_vec(out))
    }

    /// Mean of `g` over subjects at `v`.
    pub fn g_mean(&self, panel: &ProxyPanel, v: &[f64]) -> Result<DVector<f64>> {
        let l = &self.layout;
        let mut out = vec![CompensatedSum::default(); l.len()];
        let mut row = vec![0.0; l.raw_len()];
        for i in 0..panel.n() {
            self.raw_residual_into(panel, i, v, &mut row);
            for (acc, r) in out.iter_mut().zip(&row) {
                acc.add(*r);
            }
        }
        let n = panel.n() as f64;
        let mut res: Vec<f64> = out.iter().map(|a| a.value() / n).collect();
        let derived = self.derived_from_raw(v)?;
        for (t, d) in derived.iter().enumerate() {
            res[l.raw_len() + t] = d - v[l.raw_len() + t];
        }
        Ok(DVector::from_vec(res))
    }

    /// Mean Jacobian of `g` (central differences). Raw rows do not depend on
    /// derived coordinates and derived rows depend on them as `-I`; only the
    /// remaining blocks are differenced.
    pub fn g_jacobian(&self, panel: &ProxyPanel) -> Result<DMatrix<f64>> {
        let l = &self.layout;
        let v = self.to_vec();
        let raw_cols: Vec<usize> = (0..l.raw_len()).collect();
        let failure = std::cell::RefCell::new(None);
        let jr = linalg::numeric_jacobian(
            |x| match self.g_mean(panel, x) {
                Ok(g) => g,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    DVector::zeros(l.len())
                }
            },
            &v,
            &raw_cols,
            l.len(),
        );
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        let mut a = DMatrix::zeros(l.len(), l.len());
        a.columns_mut(0, l.raw_len()).copy_from(&jr);
        for t in l.raw_len()..l.len() {
            a[(t, t)] = -1.0;
        }
        Ok(a)
    }

    /// Per-subject `g` scores at the estimate; derived rows vanish there.
    pub fn g_scores(&self, panel: &ProxyPanel) -> DMatrix<f64> {
        let l = &self.layout;
        let v = self.to_vec();
        let raw = self.raw_scores(panel, &v);
        let mut out = DMatrix::zeros(panel.n(), l.len());
        out.columns_mut(0, l.raw_len()).copy_from(&raw);
        out
    }

    /// Appends the `g` block to a stacked system whose `xi` coordinates start
    /// at column `offset`.
    pub fn push_g_block(
        &self,
        panel: &ProxyPanel,
        sys: &mut StackedSystem,
        offset: usize,
    ) -> Result<Range<usize>> {
        let a = self.g_jacobian(panel)?;
        let mut jac = DMatrix::zeros(self.layout.len(), sys.dim());
        jac.columns_mut(offset, self.layout.len()).copy_from(&a);
        sys.push("g", Some(self.g_scores(panel)), jac)
    }
}

/// Covariance of `sqrt(n)(xi_hat - xi)` from the `g` system alone.
pub fn sandwich_xi(panel: &ProxyPanel, xi: &Xi) -> Result<DMatrix<f64>> {
    let mut sys = StackedSystem::new(panel.n(), xi.layout.len());
    xi.push_g_block(panel, &mut sys, 0)?;
    sys.sandwich()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ProxySpec;

    fn scalar_raw(mu: &[f64], sigma: &[&[f64]]) -> RawMoments {
        let k = mu.len();
        RawMoments {
            k,
            p: 1,
            q: 0,
            n: 100,
            mu: mu.iter().map(|&m| DVector::from_element(1, m)).collect(),
            sigma: (0..k)
                .map(|j| (0..k).map(|l| DMatrix::from_element(1, 1, sigma[j][l])).collect())
                .collect(),
            mu_z: DVector::zeros(0),
            sigma_zz: DMatrix::zeros(0, 0),
            sigma_zj: vec![DMatrix::zeros(0, 1); k],
            n_j: vec![100; k],
            n_jl: vec![vec![100; k]; k],
        }
    }

    #[test]
    fn two_unbiased_proxies_population_moments() {
        let raw = scalar_raw(&[0.0, 0.0], &[&[1.5, 1.0], &[1.0, 2.0]]);
        let par = identify(&raw, &ErrorModelSpec::all_unbiased(2), false).unwrap();
        assert_eq!(par.mu_x[0], 0.0);
        assert!((par.sigma_xx[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((par.m[0][(0, 0)] - 0.5).abs() < 1e-15);
        assert!((par.m[1][(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(par.eta1[0][0], 1.0);
        assert_eq!(par.eta0[1][0], 0.0);
    }

    #[test]
    fn known_intercept_override_matches_shifted_proxy() {
        // proxy 2 has intercept 3; supplying it should give the same answer
        // as identifying the shifted proxy directly.
        let raw = scalar_raw(&[1.0, 4.0, 1.0], &[&[2.0, 1.0, 1.0], &[1.0, 3.0, 1.0], &[1.0, 1.0, 2.5]]);
        let mut spec = ErrorModelSpec::all_unbiased(3);
        spec.proxies[1] = ProxySpec {
            eta0: Some(vec![3.0]),
            in_j0: false,
            ..ProxySpec::unbiased()
        };
        let par = identify(&raw, &spec, false).unwrap();
        assert!((par.eta0[1][0] - 3.0).abs() < 1e-14);
        assert!((par.mu_x[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn layout_lengths() {
        let l = XiLayout::new(3, 3, 0, false);
        assert_eq!(l.raw_len(), 9 + 3 * 6 + 3 * 9);
        assert_eq!(l.len(), l.raw_len() + 3 + 6 + 9 + 9 + 18 + 27);
        assert_eq!(l.labels().len(), l.len());
    }
}
