//! Simulation studies and data analyses that run every estimator side by
//! side.
//!
//! Replicates run in parallel, each on a panel drawn from its own derived
//! seed, so a summary depends only on `(study, n, reps, methods, seed)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bootstrap;
use crate::calibration::{self, WeightMode};
use crate::correction::Xi;
use crate::data::{generate_panel, ErrorModelSpec, ProxyPanel, ProxySpec, ScenarioConfig};
use crate::error::{MeError, Result};
use crate::mr::{self, TargetCovariance};
use crate::outcome::{self, expit, CovKind, Family, FitResult};
use crate::rng;
use crate::simex::{self, SimexConfig, SimexMode};

/// One estimator of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Naive,
    StandardRc,
    StandardSimex,
    EmpiricalSimex,
    /// `use_z`: covariates enter the correction parameters and predictor.
    /// `iid`: only proxies declared unbiased are used.
    GenRc { weights: WeightMode, use_z: bool, iid: bool },
    GenSimex { mode: SimexMode, iid: bool },
    Mr { iid: bool },
}

impl Method {
    pub fn parse(tag: &str) -> Result<Self> {
        let (base, iid) = match tag.strip_suffix("-iid") {
            Some(b) => (b, true),
            None => (tag, false),
        };
        let (base, noz) = match base.strip_suffix("-noz") {
            Some(b) => (b, true),
            None => (base, false),
        };
        let unknown = || MeError::Config(format!("unknown method '{tag}'"));
        let plain = !iid && !noz;
        match base {
            "naive" if plain => Ok(Method::Naive),
            "standard-rc" if plain => Ok(Method::StandardRc),
            "standard-simex" if plain => Ok(Method::StandardSimex),
            "empirical-simex" if plain => Ok(Method::EmpiricalSimex),
            "gen-rc-equal" => Ok(Method::GenRc { weights: WeightMode::Equal, use_z: !noz, iid }),
            "gen-rc-optimal" => Ok(Method::GenRc { weights: WeightMode::Optimal, use_z: !noz, iid }),
            "gen-simex-proxies" if !noz => Ok(Method::GenSimex { mode: SimexMode::AverageProxies, iid }),
            "gen-simex-estimates" if !noz => Ok(Method::GenSimex { mode: SimexMode::AverageEstimates, iid }),
            "mr" if !noz => Ok(Method::Mr { iid }),
            _ => Err(unknown()),
        }
    }

    pub fn tag(&self) -> String {
        let iid = |b: bool| if b { "-iid" } else { "" };
        match *self {
            Method::Naive => "naive".into(),
            Method::StandardRc => "standard-rc".into(),
            Method::StandardSimex => "standard-simex".into(),
            Method::EmpiricalSimex => "empirical-simex".into(),
            Method::GenRc { weights, use_z, iid: i } => {
                format!("gen-rc-{}{}{}", weights.tag(), if use_z { "" } else { "-noz" }, iid(i))
            }
            Method::GenSimex { mode, iid: i } => format!("gen-simex-{}{}", mode.tag(), iid(i)),
            Method::Mr { iid: i } => format!("mr{}", iid(i)),
        }
    }

    /// Whether the method is one of the generalized corrections.
    pub fn is_generalized(&self) -> bool {
        matches!(self, Method::GenRc { .. } | Method::GenSimex { .. } | Method::Mr { .. })
    }

    fn iid(&self) -> bool {
        match *self {
            Method::GenRc { iid, .. } | Method::GenSimex { iid, .. } | Method::Mr { iid } => iid,
            _ => false,
        }
    }
}

pub fn parse_methods(tags: &[String]) -> Result<Vec<Method>> {
    tags.iter().map(|t| Method::parse(t.trim())).collect()
}

/// Default roster for a study.
pub fn default_methods(study: u8) -> Vec<Method> {
    let mut m = vec![
        Method::Naive,
        Method::StandardRc,
        Method::StandardSimex,
        Method::GenRc { weights: WeightMode::Equal, use_z: true, iid: false },
        Method::GenRc { weights: WeightMode::Optimal, use_z: true, iid: false },
        Method::GenSimex { mode: SimexMode::AverageProxies, iid: false },
        Method::GenSimex { mode: SimexMode::AverageEstimates, iid: false },
    ];
    match study {
        2 => {
            m.push(Method::GenRc { weights: WeightMode::Equal, use_z: false, iid: false });
            m.push(Method::GenRc { weights: WeightMode::Optimal, use_z: false, iid: false });
        }
        3 => {
            m.push(Method::Mr { iid: false });
            m.push(Method::GenRc { weights: WeightMode::Optimal, use_z: true, iid: true });
            m.push(Method::GenSimex { mode: SimexMode::AverageProxies, iid: true });
            m.push(Method::GenSimex { mode: SimexMode::AverageEstimates, iid: true });
        }
        _ => {}
    }
    m
}

/// Options shared by every estimator in a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub simex: SimexConfig,
    /// Attach sandwich covariances where they exist.
    pub sandwich: bool,
    pub mr_target: TargetCovariance,
}

/// Outcome fit on the per-subject mean of the observed proxies declared
/// unbiased, falling back to all observed proxies for subjects without one.
pub fn fit_naive(panel: &ProxyPanel, family: Family, spec: &ErrorModelSpec) -> Result<FitResult> {
    let (n, p, k) = (panel.n(), panel.p(), panel.k());
    let unbiased: Vec<usize> = (0..k).filter(|&j| spec.in_j0(j) && spec.in_j1(j)).collect();
    let mut fallback = 0;
    let x = DMatrix::from_fn(n, p, |i, c| {
        let mut use_: Vec<usize> = unbiased.iter().copied().filter(|&j| panel.observed(i, j)).collect();
        if use_.is_empty() {
            use_ = (0..k).filter(|&j| panel.observed(i, j)).collect();
            if c == 0 {
                fallback += 1;
            }
        }
        use_.iter().map(|&j| panel.value(i, j, c)).sum::<f64>() / use_.len() as f64
    });
    let mut fit = outcome::fit_known(family, panel.y(), &x, panel.z(), "naive")?;
    if fallback > 0 {
        fit.flags.push(format!("{fallback}-subjects-without-unbiased-proxy-used-all-proxies"));
    }
    Ok(fit)
}

/// Panel and spec restricted to the proxies declared unbiased.
fn unbiased_only(panel: &ProxyPanel, spec: &ErrorModelSpec) -> Result<(ProxyPanel, ErrorModelSpec)> {
    let keep: Vec<usize> = (0..spec.k()).filter(|&j| spec.in_j0(j) && spec.in_j1(j)).collect();
    if keep.len() < 2 {
        return Err(MeError::Config("fewer than two proxies are declared unbiased".into()));
    }
    let sub = panel.select_proxies(&keep)?;
    let rows: Vec<usize> = (0..sub.n()).filter(|&i| sub.kappa(i) > 0).collect();
    Ok((sub.select_rows(&rows), spec.select(&keep)))
}

/// Runs one method on one panel.
pub fn run_method(
    method: Method,
    panel: &ProxyPanel,
    family: Family,
    spec: &ErrorModelSpec,
    opts: &RunOptions,
) -> Result<FitResult> {
    if method.iid() {
        let (sub, sub_spec) = unbiased_only(panel, spec)?;
        let plain = match method {
            Method::GenRc { weights, use_z, .. } => Method::GenRc { weights, use_z, iid: false },
            Method::GenSimex { mode, .. } => Method::GenSimex { mode, iid: false },
            _ => Method::Mr { iid: false },
        };
        let mut fit = run_method(plain, &sub, family, &sub_spec, opts)?;
        fit.method = method.tag();
        return Ok(fit);
    }
    let has_z = panel.q() > 0;
    match method {
        Method::Naive => fit_naive(panel, family, spec),
        Method::StandardRc => {
            let (fit, _) = calibration::standard_rc(panel, family)?;
            Ok(fit)
        }
        Method::StandardSimex => Ok(simex::standard_simex(panel, family, &opts.simex)?.fit),
        Method::EmpiricalSimex => Err(MeError::NotImplemented(
            "empirical SIMEX (it falls outside the generalized error model)".into(),
        )),
        Method::GenRc { weights, use_z, .. } => {
            let xi = Xi::estimate(panel, spec, has_z && use_z)?;
            let rc = if opts.sandwich {
                calibration::fit_rc_with_sandwich(panel, family, &xi, weights)?
            } else {
                calibration::fit_rc(panel, family, &xi, weights)?
            };
            let mut fit = rc.fit;
            fit.method = method.tag();
            Ok(fit)
        }
        Method::GenSimex { mode, .. } => {
            let xi = Xi::estimate(panel, spec, has_z)?;
            let cfg = SimexConfig {
                mode,
                ..opts.simex.clone()
            };
            let sf = if opts.sandwich {
                simex::fit_simex_with_sandwich(panel, family, &xi, &cfg)?
            } else {
                simex::fit_simex(panel, family, &xi, &cfg)?
            };
            Ok(sf.fit)
        }
        Method::Mr { .. } => {
            if family != Family::Logistic {
                return Err(MeError::Config("moment reconstruction is implemented for logistic outcomes".into()));
            }
            let xi = Xi::estimate(panel, spec, false)?;
            let (alpha, _) = mr::mr_alpha(&xi, WeightMode::Equal)?;
            let m = if opts.sandwich {
                mr::fit_mr_with_sandwich(panel, &xi, &alpha, opts.mr_target)?
            } else {
                mr::fit_mr_logistic(panel, &xi, &alpha, opts.mr_target)?
            };
            Ok(m.fit)
        }
    }
}

/// Per-method, per-coefficient Monte Carlo summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub coefficient: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    pub bias: f64,
    /// Monte Carlo standard error of the mean, `sd / sqrt(successes)`.
    pub mc_se: f64,
    /// Mean reported standard error over fits that carry one. Corrected
    /// methods only report one when sandwiches are requested.
    pub mean_se: Option<f64>,
    pub successes: usize,
    pub failures: usize,
}

/// Predicted probability on one grid point, summarised over replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbabilityRow {
    pub method: String,
    pub x: f64,
    pub truth: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub study: u8,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<SummaryRow>,
    /// Logistic studies only: probability curves over the central 95% of X.
    pub probabilities: Vec<ProbabilityRow>,
    /// Root mean squared probability error per method over grid and
    /// replicates (logistic studies only).
    pub probability_rmse: Vec<(String, f64)>,
    /// Raw estimates, `estimates[m][r]` for method `m` and replicate `r`.
    #[serde(skip)]
    pub estimates: Vec<Vec<Option<FitResult>>>,
    /// Messages of failed fits, one per method with failures.
    pub errors: Vec<(String, String)>,
}

impl StudySummary {
    pub fn row(&self, method: &str, coefficient: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.coefficient == coefficient)
    }

    pub fn rmse(&self, method: &str) -> Option<f64> {
        self.probability_rmse.iter().find(|(m, _)| m == method).map(|(_, v)| *v)
    }

    /// Summary table as CSV.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "coefficient", "truth", "mean", "sd", "bias", "mc_se", "mean_se", "successes", "failures"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.coefficient.clone(),
                r.truth.to_string(),
                r.mean.to_string(),
                r.sd.to_string(),
                r.bias.to_string(),
                r.mc_se.to_string(),
                r.mean_se.map_or(String::new(), |v| v.to_string()),
                r.successes.to_string(),
                r.failures.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }

    pub fn probabilities_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "x", "truth", "mean", "lower", "upper"]).map_err(csv_err)?;
        for r in &self.probabilities {
            w.write_record([
                r.method.clone(),
                r.x.to_string(),
                r.truth.to_string(),
                r.mean.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> MeError {
    MeError::Io(std::io::Error::other(e))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| MeError::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| MeError::Io(std::io::Error::other(e)))
}

/// Grid of `points` values spanning the central 95% of a normal law.
pub fn central_grid(mean: f64, var: f64, points: usize) -> Vec<f64> {
    let half = 1.959_963_984_540_054 * var.sqrt();
    (0..points)
        .map(|g| mean - half + 2.0 * half * g as f64 / (points - 1).max(1) as f64)
        .collect()
}

/// Runs `reps` replicates of a simulation study at sample size `n`.
pub fn run_study(
    study: u8,
    n: usize,
    reps: usize,
    methods: &[Method],
    seed: u64,
    opts: &RunOptions,
) -> Result<StudySummary> {
    let cfg = ScenarioConfig::study(study)?.with_n(n);
    run_design(&cfg, study, reps, methods, seed, opts)
}

/// Like [`run_study`] for an arbitrary generative design.
pub fn run_design(
    cfg: &ScenarioConfig,
    study: u8,
    reps: usize,
    methods: &[Method],
    seed: u64,
    opts: &RunOptions,
) -> Result<StudySummary> {
    if reps == 0 {
        return Err(MeError::Config("at least one replicate is required".into()));
    }
    if methods.is_empty() {
        return Err(MeError::Config("no methods requested".into()));
    }
    let family = cfg.outcome.family;
    for m in methods {
        if *m == Method::EmpiricalSimex {
            return Err(MeError::NotImplemented(
                "empirical SIMEX (it falls outside the generalized error model)".into(),
            ));
        }
        if matches!(m, Method::Mr { .. }) && family != Family::Logistic {
            return Err(MeError::Config("moment reconstruction needs a logistic study".into()));
        }
    }
    let spec = cfg.true_spec();
    let per_rep: Vec<Vec<std::result::Result<FitResult, String>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rep_seed = rng::derive_seed(seed, &[u64::from(study), r as u64]);
            let panel = match generate_panel(cfg, rep_seed) {
                Ok(p) => p,
                Err(e) => return vec![Err(e.to_string()); methods.len()],
            };
            let mut o = opts.clone();
            o.simex.seed = rng::derive_seed(rep_seed, &[7]);
            methods
                .iter()
                .map(|&m| run_method(m, &panel, family, &spec, &o).map_err(|e| e.to_string()))
                .collect()
        })
        .collect();

    let truth = &cfg.outcome.coefficients;
    let names = outcome::coefficient_names(cfg.p(), cfg.q());
    let mut rows = Vec::new();
    let mut estimates = Vec::with_capacity(methods.len());
    let mut errors = Vec::new();
    for (mi, m) in methods.iter().enumerate() {
        let fits: Vec<Option<FitResult>> = per_rep.iter().map(|r| r[mi].as_ref().ok().cloned()).collect();
        if let Some(Err(e)) = per_rep.iter().map(|r| &r[mi]).find(|r| r.is_err()) {
            errors.push((m.tag(), e.clone()));
        }
        let ok: Vec<&FitResult> = fits.iter().flatten().collect();
        for (t, name) in names.iter().enumerate() {
            let vals: Vec<f64> = ok.iter().map(|f| f.theta[t]).collect();
            let s = vals.len();
            let (mean, sd) = mean_sd(&vals);
            let ses: Vec<f64> = ok.iter().filter_map(|f| f.se().map(|v| v[t])).collect();
            rows.push(SummaryRow {
                method: m.tag(),
                coefficient: name.clone(),
                truth: truth[t],
                mean,
                sd,
                bias: mean - truth[t],
                mc_se: if s > 0 { sd / (s as f64).sqrt() } else { f64::NAN },
                mean_se: (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64),
                successes: s,
                failures: reps - s,
            });
        }
        estimates.push(fits);
    }

    let (probabilities, probability_rmse) = if family == Family::Logistic && cfg.p() == 1 && cfg.q() == 0 {
        probability_curves(cfg, methods, &estimates)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(StudySummary {
        study,
        n: cfg.n,
        reps,
        seed,
        rows,
        probabilities,
        probability_rmse,
        estimates,
        errors,
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

const GRID_POINTS: usize = 41;

fn probability_curves(
    cfg: &ScenarioConfig,
    methods: &[Method],
    estimates: &[Vec<Option<FitResult>>],
) -> (Vec<ProbabilityRow>, Vec<(String, f64)>) {
    let grid = central_grid(cfg.x.mean[0], cfg.x.cov[0][0], GRID_POINTS);
    let b = &cfg.outcome.coefficients;
    let mut rows = Vec::new();
    let mut rmse = Vec::new();
    for (m, fits) in methods.iter().zip(estimates) {
        let ok: Vec<&FitResult> = fits.iter().flatten().collect();
        if ok.is_empty() {
            continue;
        }
        let mut sq = 0.0;
        for &x in &grid {
            let truth = expit(b[0] + b[1] * x);
            let mut probs: Vec<f64> = ok.iter().map(|f| expit(f.theta[0] + f.theta[1] * x)).collect();
            sq += probs.iter().map(|p| (p - truth).powi(2)).sum::<f64>();
            probs.sort_by(|a, c| a.total_cmp(c));
            rows.push(ProbabilityRow {
                method: m.tag(),
                x,
                truth,
                mean: probs.iter().sum::<f64>() / probs.len() as f64,
                lower: bootstrap::quantile(&probs, 0.025),
                upper: bootstrap::quantile(&probs, 0.975),
            });
        }
        rmse.push((m.tag(), (sq / (grid.len() * ok.len()) as f64).sqrt()));
    }
    (rows, rmse)
}

/// Identification assumptions for the four analyses of the two-visit
/// cohort layout (readings ordered visit 2 first, visit 2 second, visit 3
/// first, visit 3 second):
///
/// 1. every reading unbiased;
/// 2. visit 3 unbiased, visit 2 readings with free intercepts;
/// 3. second readings unbiased, first readings with free intercepts;
/// 4. visit 3 unbiased, visit 2 readings with free intercepts and scales.
pub fn cohort_spec(scenario: u8) -> Result<ErrorModelSpec> {
    let u = ProxySpec::unbiased;
    let shift = || ProxySpec::with_flags(false, true);
    let free = ProxySpec::unrestricted;
    let proxies = match scenario {
        1 => vec![u(), u(), u(), u()],
        2 => vec![shift(), shift(), u(), u()],
        3 => vec![shift(), u(), shift(), u()],
        4 => vec![free(), free(), u(), u()],
        other => return Err(MeError::Config(format!("unknown scenario {other} (expected 1 to 4)"))),
    };
    Ok(ErrorModelSpec { proxies })
}

/// Options for [`run_analysis`].
#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub run: RunOptions,
    /// Bootstrap replicates for calibration intervals.
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            run: RunOptions {
                sandwich: true,
                ..RunOptions::default()
            },
            bootstrap_reps: 1000,
            seed: 1,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub method: String,
    pub coefficient: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// `sandwich-normal` or `bootstrap-bc`.
    pub interval: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub scenario: Option<u8>,
    /// Estimated intercepts and scales of every proxy.
    pub eta0: Vec<Vec<f64>>,
    pub eta1: Vec<Vec<f64>>,
    pub rows: Vec<AnalysisRow>,
    pub fits: Vec<FitResult>,
    pub errors: Vec<(String, String)>,
}

impl AnalysisReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "coefficient", "estimate", "se", "lower", "upper", "interval"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.coefficient.clone(),
                r.estimate.to_string(),
                opt(r.se),
                opt(r.lower),
                opt(r.upper),
                r.interval.clone(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Fits every method to one observed panel. Calibration intervals are
/// bias-corrected bootstrap intervals; SIMEX, moment reconstruction and
/// naive intervals are normal-theory intervals from the sandwich.
pub fn run_analysis(
    panel: &ProxyPanel,
    spec: &ErrorModelSpec,
    family: Family,
    scenario: Option<u8>,
    methods: &[Method],
    opts: &AnalysisOptions,
) -> Result<AnalysisReport> {
    if spec.k() != panel.k() {
        return Err(MeError::Config(format!(
            "spec describes {} proxies but the panel has {}",
            spec.k(),
            panel.k()
        )));
    }
    spec.validate(panel.p(), panel.q() > 0)?;
    let xi = Xi::estimate(panel, spec, panel.q() > 0)?;
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut errors = Vec::new();
    for &m in methods {
        if m == Method::EmpiricalSimex {
            return Err(MeError::NotImplemented(
                "empirical SIMEX (it falls outside the generalized error model)".into(),
            ));
        }
        let result = match m {
            Method::GenRc { weights, use_z, iid: false } => calibration::fit_rc_bootstrap(
                panel,
                family,
                spec,
                use_z && panel.q() > 0,
                weights,
                opts.bootstrap_reps,
                opts.seed,
                opts.level,
            )
            .map(|rc| {
                let mut f = rc.fit;
                f.method = m.tag();
                f
            }),
            Method::StandardRc => standard_rc_bootstrap(panel, family, opts),
            _ => run_method(m, panel, family, spec, &opts.run),
        };
        match result {
            Ok(fit) => {
                rows.extend(analysis_rows(&fit, opts.level));
                fits.push(fit);
            }
            Err(e) if !e.is_config() => errors.push((m.tag(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(AnalysisReport {
        scenario,
        eta0: xi.params.eta0.iter().map(|v| v.iter().copied().collect()).collect(),
        eta1: xi.params.eta1.iter().map(|v| v.iter().copied().collect()).collect(),
        rows,
        fits,
        errors,
    })
}

fn standard_rc_bootstrap(panel: &ProxyPanel, family: Family, opts: &AnalysisOptions) -> Result<FitResult> {
    let (fit, _) = calibration::standard_rc(panel, family)?;
    let draws = bootstrap::bootstrap(panel, opts.bootstrap_reps, opts.seed, |bp| {
        Ok(calibration::standard_rc(bp, family)?.0.theta)
    });
    let cov = draws.scaled_cov(panel.n())?;
    let (lower, upper) = draws.bc_interval(&fit.theta, opts.level)?;
    let mut fit = fit.with_cov(&cov, CovKind::Bootstrap);
    fit.interval = Some(outcome::Interval {
        lower,
        upper,
        level: opts.level,
        replicates: draws.estimates.len(),
        failed: draws.failed,
    });
    Ok(fit)
}

fn analysis_rows(fit: &FitResult, level: f64) -> Vec<AnalysisRow> {
    let se = fit.se();
    let (lo, hi, kind) = match (&fit.interval, fit.normal_interval(level)) {
        (Some(iv), _) => (Some(iv.lower.clone()), Some(iv.upper.clone()), "bootstrap-bc"),
        (None, Some((l, h))) => (Some(l), Some(h), "sandwich-normal"),
        (None, None) => (None, None, "none"),
    };
    fit.names
        .iter()
        .enumerate()
        .map(|(t, name)| AnalysisRow {
            method: fit.method.clone(),
            coefficient: name.clone(),
            estimate: fit.theta[t],
            se: se.as_ref().map(|s| s[t]),
            lower: lo.as_ref().map(|v| v[t]),
            upper: hi.as_ref().map(|v| v[t]),
            interval: kind.to_string(),
        })
        .collect()
}

/// JSON summary of the run configuration, for provenance in output files.
pub fn run_config_json(study: u8, n: usize, reps: usize, methods: &[Method], seed: u64, opts: &RunOptions) -> serde_json::Value {
    json!({
        "study": study,
        "n": n,
        "reps": reps,
        "seed": seed,
        "methods": methods.iter().map(Method::tag).collect::<Vec<_>>(),
        "simex_lambdas": opts.simex.lambdas,
        "simex_b": opts.simex.b_reps,
        "sandwich": opts.sandwich,
    })
}
