use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meacorr::calibration::{self, WeightMode};
use meacorr::correction::Xi;
use meacorr::data::{
    generate_panel, read_panel_csv, write_panel_csv, ErrorModelSpec, PanelSchema, ProxyPanel, ScenarioConfig,
};
use meacorr::diagnostics::{self, PairLinearity};
use meacorr::harness::{self, AnalysisOptions, RunOptions};
use meacorr::mr::{self, TargetCovariance};
use meacorr::outcome::Family;
use meacorr::simex::{self, CombineRule, ExtrapolantChoice, SimexConfig, SimexMode};
use meacorr::{MeError, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "meacorr", version, about = "Measurement-error corrections for covariates with several non-identical proxies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation study and write a summary table.
    Simulate(SimulateArgs),
    /// Fit several methods to one panel under a cohort scenario or spec.
    Analyze(AnalyzeArgs),
    /// Generalized regression calibration.
    FitRc(FitRcArgs),
    /// Generalized SIMEX.
    FitSimex(FitSimexArgs),
    /// Moment reconstruction for a binary outcome.
    FitMr(FitMrArgs),
    /// Pairwise proxy linearity and lambda-curve flatness.
    Diagnose(DiagnoseArgs),
    /// Draw a panel from a study design or a JSON scenario.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct PanelArgs {
    /// Panel CSV file.
    #[arg(long)]
    panel: PathBuf,
    /// Error-model spec (JSON); every proxy unbiased when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Column layout: `cohort`, a JSON schema file, or inferred from the header.
    #[arg(long)]
    schema: Option<String>,
    #[arg(long, default_value = "linear")]
    family: String,
    /// Keep error-free covariates out of the correction parameters.
    #[arg(long)]
    no_z: bool,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimexArgs {
    /// Comma-separated lambda grid starting at 0.
    #[arg(long, default_value = "0,0.5,1,1.5,2")]
    lambdas: String,
    /// Pseudo-data replicates per grid point.
    #[arg(long, default_value_t = 100)]
    b: usize,
    /// `auto`, one of linear|quadratic|nonlinear, or one per coefficient.
    #[arg(long, default_value = "auto")]
    extrapolant: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    study: u8,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Comma-separated method tags; the study's default roster when omitted.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Attach sandwich standard errors.
    #[arg(long)]
    sandwich: bool,
    #[arg(long, default_value_t = 100)]
    simex_b: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Probability-curve CSV for logistic studies.
    #[arg(long)]
    prob_out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Cohort scenario 1 to 4; implies the cohort schema unless one is given.
    #[arg(long)]
    scenario: Option<u8>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    schema: Option<String>,
    #[arg(long, default_value = "logistic")]
    family: String,
    #[arg(long, default_value = "naive,standard-rc,gen-rc-equal,gen-rc-optimal,gen-simex-proxies,gen-simex-estimates")]
    methods: String,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 100)]
    simex_b: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Table CSV; the JSON report goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitRcArgs {
    #[command(flatten)]
    io: PanelArgs,
    #[arg(long, default_value = "equal")]
    weights: String,
    /// Bootstrap replicates; sandwich covariance when zero.
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct FitSimexArgs {
    #[command(flatten)]
    io: PanelArgs,
    #[command(flatten)]
    simex: SimexArgs,
    /// `proxies` (average proxies) or `estimates` (average estimates).
    #[arg(long, default_value = "proxies")]
    mode: String,
    /// Pool per-proxy estimates with minimum-variance weights.
    #[arg(long)]
    optimal_combine: bool,
    /// Lambda-curve CSV.
    #[arg(long)]
    curve_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitMrArgs {
    #[command(flatten)]
    io: PanelArgs,
    #[arg(long, default_value = "equal")]
    alpha: String,
    /// class | pooled | marginal
    #[arg(long, default_value = "class")]
    target: String,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    io: PanelArgs,
    #[command(flatten)]
    simex: SimexArgs,
    /// CSV of decile residual means and lambda curves.
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Study 1 to 3.
    #[arg(long, conflicts_with_all = ["config", "cohort"])]
    study: Option<u8>,
    /// JSON scenario file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// The synthetic two-visit cohort, written with the cohort schema.
    #[arg(long)]
    cohort: bool,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => analyze(a),
        Command::FitRc(a) => fit_rc(a),
        Command::FitSimex(a) => fit_simex(a),
        Command::FitMr(a) => fit_mr(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Generate(a) => generate(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_schema(s: Option<&str>) -> Result<Option<PanelSchema>> {
    match s {
        None => Ok(None),
        Some("cohort") => Ok(Some(PanelSchema::cohort())),
        Some(path) => Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?)),
    }
}

fn load_spec(path: Option<&Path>, k: usize) -> Result<ErrorModelSpec> {
    match path {
        None => Ok(ErrorModelSpec::all_unbiased(k)),
        Some(p) => {
            let spec: ErrorModelSpec = serde_json::from_str(&fs::read_to_string(p)?)?;
            if spec.k() != k {
                return Err(MeError::Config(format!("spec describes {} proxies but the panel has {k}", spec.k())));
            }
            Ok(spec)
        }
    }
}

struct Loaded {
    panel: ProxyPanel,
    spec: ErrorModelSpec,
    family: Family,
    has_z: bool,
}

fn load(io: &PanelArgs) -> Result<Loaded> {
    let schema = load_schema(io.schema.as_deref())?;
    let panel = read_panel_csv(&io.panel, schema.as_ref())?;
    let spec = load_spec(io.spec.as_deref(), panel.k())?;
    let has_z = panel.q() > 0 && !io.no_z;
    spec.validate(panel.p(), has_z)?;
    Ok(Loaded {
        family: Family::parse(&io.family)?,
        has_z,
        panel,
        spec,
    })
}

fn parse_lambdas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| MeError::Config(format!("bad lambda '{t}'"))))
        .collect()
}

fn simex_config(a: &SimexArgs, mode: SimexMode) -> Result<SimexConfig> {
    Ok(SimexConfig {
        lambdas: parse_lambdas(&a.lambdas)?,
        b_reps: a.b,
        extrapolant: ExtrapolantChoice::parse(&a.extrapolant)?,
        mode,
        seed: a.seed,
        ..SimexConfig::default()
    })
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let methods = match &a.methods {
        Some(s) => harness::parse_methods(&s.split(',').map(str::to_string).collect::<Vec<_>>())?,
        None => harness::default_methods(a.study),
    };
    let opts = RunOptions {
        simex: SimexConfig {
            b_reps: a.simex_b,
            ..SimexConfig::default()
        },
        sandwich: a.sandwich,
        ..RunOptions::default()
    };
    let summary = harness::run_study(a.study, a.n, a.reps, &methods, a.seed, &opts)?;
    emit(a.out.as_deref(), &summary.to_csv()?)?;
    if let Some(p) = &a.prob_out {
        fs::write(p, summary.probabilities_csv()?)?;
    }
    for (m, e) in &summary.errors {
        eprintln!("warning: {m}: some replicates failed ({e})");
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let schema = match (a.schema.as_deref(), a.scenario) {
        (None, Some(_)) => Some(PanelSchema::cohort()),
        (s, _) => load_schema(s)?,
    };
    let panel = read_panel_csv(&a.panel, schema.as_ref())?;
    let spec = match (&a.spec, a.scenario) {
        (Some(p), _) => load_spec(Some(p), panel.k())?,
        (None, Some(s)) => harness::cohort_spec(s)?,
        (None, None) => ErrorModelSpec::all_unbiased(panel.k()),
    };
    let methods = harness::parse_methods(&a.methods.split(',').map(str::to_string).collect::<Vec<_>>())?;
    let opts = AnalysisOptions {
        run: RunOptions {
            simex: SimexConfig {
                b_reps: a.simex_b,
                seed: a.seed,
                ..SimexConfig::default()
            },
            sandwich: true,
            ..RunOptions::default()
        },
        bootstrap_reps: a.bootstrap,
        seed: a.seed,
        level: 0.95,
    };
    let report = harness::run_analysis(&panel, &spec, Family::parse(&a.family)?, a.scenario, &methods, &opts)?;
    if let Some(p) = &a.out {
        fs::write(p, report.to_csv()?)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn fit_rc(a: FitRcArgs) -> Result<()> {
    let l = load(&a.io)?;
    let mode = WeightMode::parse(&a.weights)?;
    let rc = if a.bootstrap > 0 {
        calibration::fit_rc_bootstrap(&l.panel, l.family, &l.spec, l.has_z, mode, a.bootstrap, a.seed, 0.95)?
    } else {
        let xi = Xi::estimate(&l.panel, &l.spec, l.has_z)?;
        calibration::fit_rc_with_sandwich(&l.panel, l.family, &xi, mode)?
    };
    emit(a.io.out.as_deref(), &serde_json::to_string_pretty(&rc.fit)?)
}

fn fit_simex(a: FitSimexArgs) -> Result<()> {
    let l = load(&a.io)?;
    let mut cfg = simex_config(&a.simex, SimexMode::parse(&a.mode)?)?;
    if a.optimal_combine {
        cfg.combine = CombineRule::Optimal;
    }
    let xi = Xi::estimate(&l.panel, &l.spec, l.has_z)?;
    let sf = simex::fit_simex_with_sandwich(&l.panel, l.family, &xi, &cfg)?;
    if let Some(p) = &a.curve_out {
        fs::write(p, curve_csv(&sf)?)?;
    }
    emit(a.io.out.as_deref(), &serde_json::to_string_pretty(&sf.fit)?)
}

fn curve_csv(sf: &simex::SimexFit) -> Result<String> {
    let mut s = String::from("unit,coefficient,lambda,estimate,mc_se\n");
    for (unit, coef, lambda, est, se) in sf.curve_rows() {
        s.push_str(&format!("{unit},{coef},{lambda},{est},{se}\n"));
    }
    Ok(s)
}

fn fit_mr(a: FitMrArgs) -> Result<()> {
    let l = load(&a.io)?;
    if l.family != Family::Logistic && a.io.family != "linear" {
        return Err(MeError::Config("moment reconstruction fits a logistic model only".into()));
    }
    let xi = Xi::estimate(&l.panel, &l.spec, false)?;
    let (alpha, flags) = mr::mr_alpha(&xi, WeightMode::parse(&a.alpha)?)?;
    let mut m = mr::fit_mr_with_sandwich(&l.panel, &xi, &alpha, TargetCovariance::parse(&a.target)?)?;
    m.fit.flags.extend(flags);
    emit(a.io.out.as_deref(), &serde_json::to_string_pretty(&m.fit)?)
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let l = load(&a.io)?;
    let k = l.panel.k();
    let mut pairs: Vec<PairLinearity> = Vec::new();
    let mut skipped = Vec::new();
    for j in 0..k {
        for m in 0..k {
            if j == m {
                continue;
            }
            match diagnostics::proxy_pair_linearity(&l.panel, j, m) {
                Ok(r) => pairs.extend(r),
                Err(e) => skipped.push(json!({"j": j + 1, "l": m + 1, "reason": e.to_string()})),
            }
        }
    }
    let xi = Xi::estimate(&l.panel, &l.spec, l.has_z)?;
    let cfg = simex_config(&a.simex, SimexMode::AverageProxies)?;
    let sf = simex::fit_simex(&l.panel, l.family, &xi, &cfg)?;
    let mut flat = Vec::new();
    for c in &sf.curves {
        let f = diagnostics::lambda_flatness(c)?;
        flat.push(json!({"unit": c.label, "coefficients": sf.fit.names, "flatness": f}));
    }
    let report = json!({
        "pairs": pairs,
        "skipped_pairs": skipped,
        "lambda_flatness": flat,
    });
    if let Some(p) = &a.csv_out {
        let mut s = String::from("kind,label,coefficient,position,value,mc_se\n");
        for r in &pairs {
            for (d, v) in r.decile_residual_means.iter().enumerate() {
                s.push_str(&format!("decile,x{}~x{}:{},,{},{v},\n", r.j + 1, r.l + 1, r.component + 1, d + 1));
            }
        }
        for (unit, coef, lambda, est, se) in sf.curve_rows() {
            s.push_str(&format!("lambda,{unit},{coef},{lambda},{est},{se}\n"));
        }
        fs::write(p, s)?;
    }
    emit(a.io.out.as_deref(), &serde_json::to_string_pretty(&report)?)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (mut cfg, schema) = if a.cohort {
        (ScenarioConfig::cohort(), Some(PanelSchema::cohort()))
    } else if let Some(s) = a.study {
        (ScenarioConfig::study(s)?, None)
    } else if let Some(p) = &a.config {
        (serde_json::from_str(&fs::read_to_string(p)?)?, None)
    } else {
        return Err(MeError::Config("one of --study, --config or --cohort is required".into()));
    };
    if let Some(n) = a.n {
        cfg = cfg.with_n(n);
    }
    let panel = generate_panel(&cfg, a.seed)?;
    write_panel_csv(&panel, &a.out, schema.as_ref())
}
