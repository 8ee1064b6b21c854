use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::panel::{ErrorModelSpec, ErrorStructure, ProxyPanel, ProxySpec};
use crate::error::{MeError, Result};
use crate::outcome::{expit, Family};
use crate::rng;

/// Law of one error-free covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ZLaw {
    Normal { mean: f64, var: f64 },
    Bernoulli { prob: f64 },
}

/// `X ~ N(mean + z_effect * z, cov)`; `z_effect` is `p x q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XLaw {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    #[serde(default)]
    pub z_effect: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    Normal,
    Uniform,
}

/// Scalar error law parameterised by mean and variance. A uniform law has
/// half-width `sqrt(3 var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorLaw {
    pub dist: ErrorDist,
    pub mean: f64,
    pub var: f64,
}

impl ErrorLaw {
    pub fn normal(var: f64) -> Self {
        ErrorLaw {
            dist: ErrorDist::Normal,
            mean: 0.0,
            var,
        }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        ErrorLaw {
            dist: ErrorDist::Uniform,
            mean: 0.5 * (lo + hi),
            var: (hi - lo) * (hi - lo) / 12.0,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.dist {
            ErrorDist::Normal => {
                let e: f64 = rng.sample(StandardNormal);
                self.mean + self.var.sqrt() * e
            }
            ErrorDist::Uniform => {
                let h = (3.0 * self.var).sqrt();
                self.mean + h * (2.0 * rng.random::<f64>() - 1.0)
            }
        }
    }
}

/// Generative law of one proxy. Additive: `eta0 + eta1 x + e`.
/// Multiplicative: `eta0 + eta1 x v` where `v` follows `error` (mean 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyLaw {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub structure: ErrorStructure,
    pub eta0: Vec<f64>,
    pub eta1: Vec<f64>,
    pub error: Vec<ErrorLaw>,
    #[serde(default)]
    pub missing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLaw {
    pub family: Family,
    /// `(intercept, x block, z block)`.
    pub coefficients: Vec<f64>,
    /// Residual variance of the linear family.
    #[serde(default = "one")]
    pub noise_var: f64,
    /// Shape of the gamma family.
    #[serde(default = "one")]
    pub gamma_shape: f64,
}

fn one() -> f64 {
    1.0
}

/// Complete generative description of a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    pub x: XLaw,
    #[serde(default)]
    pub z: Vec<ZLaw>,
    pub outcome: OutcomeLaw,
    pub proxies: Vec<ProxyLaw>,
}

const TAG_Z: u64 = 1;
const TAG_X: u64 = 2;
const TAG_Y: u64 = 3;
const TAG_ERR: u64 = 10;
const TAG_MASK: u64 = 100;

impl ScenarioConfig {
    pub fn p(&self) -> usize {
        self.x.mean.len()
    }

    pub fn q(&self) -> usize {
        self.z.len()
    }

    pub fn k(&self) -> usize {
        self.proxies.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        let q = self.q();
        let bad = |m: String| Err(MeError::Config(m));
        if p == 0 {
            return bad("x.mean must be non-empty".into());
        }
        if self.x.cov.len() != p || self.x.cov.iter().any(|r| r.len() != p) {
            return bad(format!("x.cov must be {p}x{p}"));
        }
        if !self.x.z_effect.is_empty()
            && (self.x.z_effect.len() != p || self.x.z_effect.iter().any(|r| r.len() != q))
        {
            return bad(format!("x.z_effect must be {p}x{q}"));
        }
        if self.outcome.coefficients.len() != 1 + p + q {
            return bad(format!(
                "outcome.coefficients has length {}, expected {}",
                self.outcome.coefficients.len(),
                1 + p + q
            ));
        }
        if self.proxies.is_empty() {
            return bad("at least one proxy law is required".into());
        }
        for (j, law) in self.proxies.iter().enumerate() {
            if law.eta0.len() != p || law.eta1.len() != p || law.error.len() != p {
                return bad(format!("proxy {} parameters must have length {p}", j + 1));
            }
            if !(0.0..1.0).contains(&law.missing) {
                return bad(format!("proxy {} missing fraction must be in [0,1)", j + 1));
            }
            if law.error.iter().any(|e| !(e.var >= 0.0)) {
                return bad(format!("proxy {} error variance must be nonnegative", j + 1));
            }
        }
        for zl in &self.z {
            match zl {
                ZLaw::Normal { var, .. } if !(*var >= 0.0) => {
                    return bad("z variance must be nonnegative".into())
                }
                ZLaw::Bernoulli { prob } if !(0.0..=1.0).contains(prob) => {
                    return bad("z probability must be in [0,1]".into())
                }
                _ => {}
            }
        }
        if self.outcome.family == Family::GammaLog && !(self.outcome.gamma_shape > 0.0) {
            return bad("gamma shape must be positive".into());
        }
        Ok(())
    }

    /// Identification assumptions that hold under this generative law:
    /// a proxy is in J0 when its intercept is zero and in J1 when its scale
    /// is one.
    pub fn true_spec(&self) -> ErrorModelSpec {
        ErrorModelSpec {
            proxies: self
                .proxies
                .iter()
                .map(|l| ProxySpec {
                    name: l.name.clone(),
                    structure: l.structure,
                    in_j0: l.eta0.iter().all(|&v| v == 0.0),
                    in_j1: l.eta1.iter().all(|&v| v == 1.0),
                    eta0: None,
                    eta1: None,
                })
                .collect(),
        }
    }

    /// Error covariance `M_j` implied by the law (diagonal).
    pub fn true_m(&self, j: usize) -> DMatrix<f64> {
        let law = &self.proxies[j];
        let p = self.p();
        let mut m = DMatrix::zeros(p, p);
        for c in 0..p {
            let e = law.error[c];
            m[(c, c)] = match law.structure {
                ErrorStructure::Additive => e.var,
                ErrorStructure::Multiplicative => {
                    // eta1^2 Var(x v) - eta1^2 Var(x), x and v independent
                    let mx = self.true_mu_x()[c];
                    let vx = self.true_sigma_xx()[(c, c)];
                    let ex2 = vx + mx * mx;
                    let ev2 = e.var + e.mean * e.mean;
                    let var_xv = ex2 * ev2 - (mx * e.mean).powi(2);
                    let var_mean_part = e.mean * e.mean * vx;
                    law.eta1[c] * law.eta1[c] * (var_xv - var_mean_part)
                }
            };
        }
        m
    }

    pub fn true_mu_x(&self) -> DVector<f64> {
        let mut mu = DVector::from_column_slice(&self.x.mean);
        let mz = self.z_mean();
        if !self.x.z_effect.is_empty() {
            for a in 0..self.p() {
                for b in 0..self.q() {
                    mu[a] += self.x.z_effect[a][b] * mz[b];
                }
            }
        }
        mu
    }

    pub fn true_sigma_xx(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut s = DMatrix::from_fn(p, p, |a, b| self.x.cov[a][b]);
        if !self.x.z_effect.is_empty() {
            let g = self.z_effect_matrix();
            s += &g * self.z_cov() * g.transpose();
        }
        s
    }

    pub fn z_effect_matrix(&self) -> DMatrix<f64> {
        let (p, q) = (self.p(), self.q());
        if self.x.z_effect.is_empty() {
            DMatrix::zeros(p, q)
        } else {
            DMatrix::from_fn(p, q, |a, b| self.x.z_effect[a][b])
        }
    }

    pub fn z_mean(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.q(),
            self.z.iter().map(|l| match l {
                ZLaw::Normal { mean, .. } => *mean,
                ZLaw::Bernoulli { prob } => *prob,
            }),
        )
    }

    pub fn z_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.q(),
            self.z.iter().map(|l| match l {
                ZLaw::Normal { var, .. } => *var,
                ZLaw::Bernoulli { prob } => prob * (1.0 - prob),
            }),
        ))
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Linear-model study: three independent normal components observed
    /// through three unbiased proxies with unequal error variances; half of
    /// the second and a fifth of the third proxy missing.
    pub fn study1() -> Self {
        let normal3 = |a: f64, b: f64, c: f64| vec![ErrorLaw::normal(a), ErrorLaw::normal(b), ErrorLaw::normal(c)];
        let proxy = |err: Vec<ErrorLaw>, missing: f64| ProxyLaw {
            name: None,
            structure: ErrorStructure::Additive,
            eta0: vec![0.0; 3],
            eta1: vec![1.0; 3],
            error: err,
            missing,
        };
        ScenarioConfig {
            n: 2000,
            seed: 1,
            x: XLaw {
                mean: vec![0.0, 3.0, 1.0],
                cov: vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]],
                z_effect: Vec::new(),
            },
            z: Vec::new(),
            outcome: OutcomeLaw {
                family: Family::Linear,
                coefficients: vec![2.0, -1.0, 2.0, 0.5],
                noise_var: 1.0,
                gamma_shape: 1.0,
            },
            proxies: vec![
                proxy(normal3(1.0, 1.0, 1.0), 0.0),
                proxy(normal3(1.0, 4.0, 3.0), 0.5),
                proxy(normal3(2.0, 2.0, 5.0), 0.2),
            ],
        }
    }

    /// Log-linear gamma study with a binary error-free covariate; the first
    /// proxy has multiplicative uniform error.
    pub fn study2() -> Self {
        ScenarioConfig {
            n: 2000,
            seed: 2,
            x: XLaw {
                mean: vec![0.0],
                cov: vec![vec![0.5]],
                z_effect: vec![vec![0.02]],
            },
            z: vec![ZLaw::Bernoulli { prob: 0.3 }],
            outcome: OutcomeLaw {
                family: Family::GammaLog,
                coefficients: vec![2.0, 2.0, -3.0],
                noise_var: 1.0,
                gamma_shape: 1.0,
            },
            proxies: vec![
                ProxyLaw {
                    name: None,
                    structure: ErrorStructure::Multiplicative,
                    eta0: vec![0.0],
                    eta1: vec![1.0],
                    error: vec![ErrorLaw::uniform(0.7, 1.3)],
                    missing: 0.0,
                },
                ProxyLaw {
                    name: None,
                    structure: ErrorStructure::Additive,
                    eta0: vec![0.0],
                    eta1: vec![1.0],
                    error: vec![ErrorLaw::normal(1.0)],
                    missing: 0.0,
                },
                ProxyLaw {
                    name: None,
                    structure: ErrorStructure::Additive,
                    eta0: vec![0.0],
                    eta1: vec![1.0],
                    error: vec![ErrorLaw::normal(1.0)],
                    missing: 0.5,
                },
            ],
        }
    }

    /// Logistic study: two unbiased normal-error proxies (the second mostly
    /// missing) and a third that is shifted, scaled and uniformly perturbed.
    pub fn study3() -> Self {
        ScenarioConfig {
            n: 2000,
            seed: 3,
            x: XLaw {
                mean: vec![3.0],
                cov: vec![vec![1.0]],
                z_effect: Vec::new(),
            },
            z: Vec::new(),
            outcome: OutcomeLaw {
                family: Family::Logistic,
                coefficients: vec![0.5, -0.5],
                noise_var: 1.0,
                gamma_shape: 1.0,
            },
            proxies: vec![
                ProxyLaw {
                    name: None,
                    structure: ErrorStructure::Additive,
                    eta0: vec![0.0],
                    eta1: vec![1.0],
                    error: vec![ErrorLaw::normal(1.0)],
                    missing: 0.0,
                },
                ProxyLaw {
                    name: None,
                    structure: ErrorStructure::Additive,
                    eta0: vec![0.0],
                    eta1: vec![1.0],
                    error: vec![ErrorLaw::normal(1.0)],
                    missing: 0.8,
                },
                ProxyLaw {
                    name: None,
                    structure: ErrorStructure::Additive,
                    eta0: vec![0.5],
                    eta1: vec![0.5],
                    error: vec![ErrorLaw::uniform(-0.5, 0.5)],
                    missing: 0.0,
                },
            ],
        }
    }

    pub fn study(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Self::study1()),
            2 => Ok(Self::study2()),
            3 => Ok(Self::study3()),
            other => Err(MeError::Config(format!("unknown study {other}"))),
        }
    }

    /// Synthetic cohort with the layout of a two-visit blood-pressure study:
    /// four readings of transformed systolic pressure `log(SBP - 50)`,
    /// covariates age, smoking and cholesterol, binary event outcome.
    /// Readings from the first visit are shifted upward slightly.
    pub fn cohort() -> Self {
        let reading = |name: &str, shift: f64, var: f64| ProxyLaw {
            name: Some(name.to_string()),
            structure: ErrorStructure::Additive,
            eta0: vec![shift],
            eta1: vec![1.0],
            error: vec![ErrorLaw::normal(var)],
            missing: 0.0,
        };
        ScenarioConfig {
            n: 1615,
            seed: 6,
            x: XLaw {
                mean: vec![4.37 - 0.006 * 48.0],
                cov: vec![vec![0.04]],
                z_effect: vec![vec![0.006, 0.0, 0.0]],
            },
            z: vec![
                ZLaw::Normal { mean: 48.0, var: 64.0 },
                ZLaw::Bernoulli { prob: 0.65 },
                ZLaw::Normal { mean: 230.0, var: 1600.0 },
            ],
            outcome: OutcomeLaw {
                family: Family::Logistic,
                coefficients: vec![-15.3, 1.9, 0.055, 0.6, 0.008],
                noise_var: 1.0,
                gamma_shape: 1.0,
            },
            proxies: vec![
                reading("sbp21", 0.04, 0.012),
                reading("sbp22", 0.0, 0.010),
                reading("sbp31", 0.02, 0.014),
                reading("sbp32", 0.0, 0.011),
            ],
        }
    }
}

/// Draws a panel from `cfg` using `seed`. Components are drawn from
/// independent streams in the order Z, X, Y, proxy errors, masks, so each
/// stream is reproducible on its own.
pub fn generate_panel(cfg: &ScenarioConfig, seed: u64) -> Result<ProxyPanel> {
    cfg.validate()?;
    let n = cfg.n;
    let (p, q, k) = (cfg.p(), cfg.q(), cfg.k());

    let mut rz = rng::stream(seed, &[TAG_Z]);
    let mut z = DMatrix::zeros(n, q);
    for c in 0..q {
        for i in 0..n {
            z[(i, c)] = match cfg.z[c] {
                ZLaw::Normal { mean, var } => {
                    let e: f64 = rz.sample(StandardNormal);
                    mean + var.sqrt() * e
                }
                ZLaw::Bernoulli { prob } => {
                    let b = Bernoulli::new(prob).map_err(|e| MeError::Config(e.to_string()))?;
                    if b.sample(&mut rz) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
        }
    }

    let cov = DMatrix::from_fn(p, p, |a, b| cfg.x.cov[a][b]);
    let chol = crate::linalg::sym_sqrt(&cov);
    let g = cfg.z_effect_matrix();
    let mut rx = rng::stream(seed, &[TAG_X]);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let e = DVector::from_fn(p, |_, _| rx.sample::<f64, _>(StandardNormal));
        let shift = &chol * e;
        for a in 0..p {
            let mut v = cfg.x.mean[a] + shift[a];
            for b in 0..q {
                v += g[(a, b)] * z[(i, b)];
            }
            x[(i, a)] = v;
        }
    }

    let beta = &cfg.outcome.coefficients;
    let mut ry = rng::stream(seed, &[TAG_Y]);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut eta = beta[0];
        for a in 0..p {
            eta += beta[1 + a] * x[(i, a)];
        }
        for b in 0..q {
            eta += beta[1 + p + b] * z[(i, b)];
        }
        y[i] = match cfg.outcome.family {
            Family::Linear => {
                let e: f64 = ry.sample(StandardNormal);
                eta + cfg.outcome.noise_var.sqrt() * e
            }
            Family::Logistic => {
                if ry.random::<f64>() < expit(eta) {
                    1.0
                } else {
                    0.0
                }
            }
            Family::GammaLog => {
                let shape = cfg.outcome.gamma_shape;
                let mean = eta.exp();
                let gd = Gamma::new(shape, mean / shape).map_err(|e| MeError::Config(e.to_string()))?;
                gd.sample(&mut ry)
            }
        };
    }

    let mut proxies = Vec::with_capacity(k);
    for (j, law) in cfg.proxies.iter().enumerate() {
        let mut re = rng::stream(seed, &[TAG_ERR + j as u64]);
        let mut m = DMatrix::zeros(n, p);
        for c in 0..p {
            for i in 0..n {
                let e = law.error[c].draw(&mut re);
                m[(i, c)] = match law.structure {
                    ErrorStructure::Additive => law.eta0[c] + law.eta1[c] * x[(i, c)] + e,
                    ErrorStructure::Multiplicative => law.eta0[c] + law.eta1[c] * x[(i, c)] * e,
                };
            }
        }
        proxies.push(m);
    }

    let mut observed = vec![vec![true; k]; n];
    for (j, law) in cfg.proxies.iter().enumerate() {
        let mut rm = rng::stream(seed, &[TAG_MASK + j as u64]);
        for row in observed.iter_mut() {
            row[j] = rm.random::<f64>() >= law.missing;
        }
    }
    // a subject that lost every proxy keeps the first one
    for row in observed.iter_mut() {
        if row.iter().all(|&o| !o) {
            row[0] = true;
        }
    }

    ProxyPanel::new(y, z, proxies, &observed)?.with_x_true(x)
}
