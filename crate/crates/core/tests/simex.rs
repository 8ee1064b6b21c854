mod common;

use common::{error_free_panel, symmetrised_panel};
use meacorr::correction::Xi;
use meacorr::data::{generate_panel, ErrorModelSpec, ProxyPanel, ScenarioConfig};
use meacorr::error::MeError;
use meacorr::outcome::{fit_known, Family};
use meacorr::simex::{
    combine_estimates, fit_extrapolant, fit_simex, fit_simex_with_sandwich, optimal_pair_weight, pseudo_proxy,
    simex_sandwich, standard_simex, CombineRule, Extrapolant, ExtrapolantChoice, SimexConfig, SimexMode,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn pseudo_proxy_moments() {
    // X* = eta0 + eta1 X + U with Var U = m; pseudo-data at lambda have
    // conditional mean X and conditional variance (1 + lambda) m / eta1^2.
    let (eta0, eta1, m): (f64, f64, f64) = (0.3, 2.0, 0.5);
    let e0 = DVector::from_element(1, eta0);
    let e1 = DVector::from_element(1, eta1);
    let root = DMatrix::from_element(1, 1, m.sqrt());
    let x_true = 1.7;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for lambda in [0.0, 1.0] {
        let draws = 1_000_000;
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..draws {
            let xs = DVector::from_element(1, eta0 + eta1 * x_true + m.sqrt() * normal(&mut rng));
            let nu = DVector::from_element(1, normal(&mut rng));
            let v = pseudo_proxy(&xs, &e0, &e1, &root, lambda, &nu)[0];
            s += v;
            ss += v * v;
        }
        let mean = s / draws as f64;
        let var = ss / draws as f64 - mean * mean;
        let target = (1.0 + lambda) * m / (eta1 * eta1);
        assert!((mean - x_true).abs() < 4.0 * (target / draws as f64).sqrt());
        assert!((var / target - 1.0).abs() < 0.01, "lambda {lambda}: {var} vs {target}");
    }
}

#[test]
fn classical_construction() {
    let x = DVector::from_element(1, 2.0);
    let nu = DVector::from_element(1, -0.7);
    let sigma2: f64 = 0.36;
    let v = pseudo_proxy(
        &x,
        &DVector::zeros(1),
        &DVector::from_element(1, 1.0),
        &DMatrix::from_element(1, 1, sigma2.sqrt()),
        1.5,
        &nu,
    );
    assert!((v[0] - (2.0 + (1.5 * sigma2).sqrt() * -0.7)).abs() < 1e-15);
}

#[test]
fn extrapolant_recovery() {
    let grid = [0.0, 0.5, 1.0, 1.5, 2.0];
    let v: Vec<f64> = grid.iter().map(|l| 1.0 + 2.0 / (1.0 + l)).collect();
    let f = fit_extrapolant(&grid, &v, Extrapolant::Nonlinear).unwrap();
    for (a, b) in f.gamma.iter().zip([1.0, 2.0, 1.0]) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(matches!(f.extrapolate(), Err(MeError::Extrapolation(_))));
    assert!(matches!(
        fit_extrapolant(&[0.0, 1.0], &[0.4, 0.3], Extrapolant::Quadratic),
        Err(MeError::Precondition(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_recovers_any_parabola(a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64) {
        let grid = [0.0, 0.5, 1.0, 1.5, 2.0];
        let v: Vec<f64> = grid.iter().map(|l| a + b * l + c * l * l).collect();
        let f = fit_extrapolant(&grid, &v, Extrapolant::Quadratic).unwrap();
        for (x, y) in f.gamma.iter().zip([a, b, c]) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        prop_assert!((f.extrapolate().unwrap() - (a - b + c)).abs() < 1e-10);
    }

    #[test]
    fn nonlinear_recovers_curves_with_pole_left_of_minus_one(
        a in -3.0..3.0f64, b in 0.2..4.0f64, c in 1.3..6.0f64, sign in prop::bool::ANY,
    ) {
        let b = if sign { b } else { -b };
        let grid = [0.0, 0.5, 1.0, 1.5, 2.0];
        let v: Vec<f64> = grid.iter().map(|l| a + b / (c + l)).collect();
        let f = fit_extrapolant(&grid, &v, Extrapolant::Nonlinear).unwrap();
        let target = a + b / (c - 1.0);
        prop_assert!((f.extrapolate().unwrap() - target).abs() < 1e-6 * (1.0 + target.abs()));
    }

    #[test]
    fn combining_identical_estimates_is_invariant(w1 in 0.0..1.0f64, t in -3.0..3.0f64) {
        let est = vec![vec![t, 2.0 * t], vec![t, 2.0 * t]];
        let c = combine_estimates(&est, None, &CombineRule::Fixed(vec![w1, 1.0 - w1 + 1e-9])).unwrap();
        prop_assert!((c.theta[0] - t).abs() < 1e-12 && (c.theta[1] - 2.0 * t).abs() < 1e-12);
    }
}

#[test]
fn pair_weight_rule() {
    assert_eq!(optimal_pair_weight(1.3, 1.3, 0.2), 0.5);
    // Minimiser of a^2 + 2(1-a)^2 + 2a(1-a)0.5 is a = 3/4.
    let a = optimal_pair_weight(1.0, 2.0, 0.5);
    let var = |a: f64| a * a + 2.0 * (1.0 - a) * (1.0 - a) + a * (1.0 - a);
    assert!((a - 0.75).abs() < 1e-15);
    for g in 0..=100 {
        assert!(var(a) <= var(g as f64 / 100.0) + 1e-15);
    }
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
    let c = combine_estimates(&[vec![1.0], vec![3.0]], Some(&cov), &CombineRule::Optimal).unwrap();
    assert!((c.theta[0] - 1.5).abs() < 1e-12);
    let f = combine_estimates(&[vec![1.0], vec![3.0]], None, &CombineRule::Optimal).unwrap();
    assert_eq!(f.theta[0], 2.0);
    assert_eq!(f.flags, vec!["combine-weights-fell-back-to-equal".to_string()]);
}

fn quick(mode: SimexMode, b: usize, seed: u64) -> SimexConfig {
    SimexConfig {
        b_reps: b,
        mode,
        seed,
        ..SimexConfig::default()
    }
}

#[test]
fn error_free_proxies_give_flat_curve_and_naive_fit() {
    for family in [Family::Linear, Family::Logistic] {
        let panel = error_free_panel(300, family, 5);
        let truth = fit_known(family, panel.y(), panel.proxy(0), panel.z(), "true").unwrap();
        let xi = Xi::estimate(&panel, &ErrorModelSpec::all_unbiased(3), false).unwrap();
        for mode in [SimexMode::AverageProxies, SimexMode::AverageEstimates] {
            let sf = fit_simex_with_sandwich(&panel, family, &xi, &quick(mode, 20, 1)).unwrap();
            for c in &sf.curves {
                for e in &c.estimates {
                    for (a, b) in e.iter().zip(&truth.theta) {
                        assert!((a - b).abs() < 1e-9);
                    }
                }
            }
            for (a, b) in sf.fit.theta.iter().zip(&truth.theta) {
                assert!((a - b).abs() < 1e-6, "{mode:?}: {a} vs {b}");
            }
            let (c1, c2) = (sf.fit.cov_matrix().unwrap(), truth.cov_matrix().unwrap());
            assert!((&c1 - &c2).amax() < 1e-6 * c2.amax().max(1.0), "{family:?} {mode:?}");
        }
    }
}

#[test]
fn averaged_proxy_reproduces_textbook_simex_on_exchangeable_replicates() {
    for with_z in [false, true] {
        let panel = symmetrised_panel(100, with_z, 4);
        let xi = Xi::estimate(&panel, &ErrorModelSpec::all_unbiased(3), with_z).unwrap();
        let cfg = quick(SimexMode::AverageProxies, 30, 8);
        let gen = fit_simex(&panel, Family::Linear, &xi, &cfg).unwrap();
        let std = standard_simex(&panel, Family::Linear, &cfg).unwrap();
        for (a, b) in gen.fit.theta.iter().zip(&std.fit.theta) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

/// Linear model, single unbiased proxy: the naive slope on pseudo-data at
/// lambda is `s_xy / (s_xx + lambda m)` up to Monte Carlo error.
#[test]
fn linear_curve_matches_attenuation_formula() {
    let cfg = ScenarioConfig::study3().with_n(20_000);
    let mut cfg = cfg;
    cfg.outcome.family = Family::Linear;
    cfg.outcome.coefficients = vec![1.0, 0.8];
    cfg.proxies[1].missing = 0.0;
    let panel = generate_panel(&cfg, 21).unwrap();
    let xi = Xi::estimate(&panel, &cfg.true_spec(), false).unwrap();
    let sc = SimexConfig {
        b_reps: 200,
        mode: SimexMode::AverageEstimates,
        seed: 4,
        ..SimexConfig::default()
    };
    let sf = fit_simex(&panel, Family::Linear, &xi, &sc).unwrap();
    let curve = &sf.curves[0];
    let n = panel.n() as f64;
    let x = panel.proxy(0).column(0);
    let y = panel.y();
    let (mx, my) = (x.sum() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let m = xi.params.m[0][(0, 0)];
    for (r, &l) in curve.lambdas.iter().enumerate() {
        let oracle = sxy / (sxx + l * m);
        let got = curve.estimates[r][1];
        let tol = if l == 0.0 { 1e-10 } else { 3.0 * curve.mc_se[r][1] };
        assert!((got - oracle).abs() <= tol, "lambda {l}: {got} vs {oracle} (tol {tol})");
    }
}

#[test]
fn slope_attenuation_grows_with_lambda() {
    let cfg = ScenarioConfig::study3();
    let panel = generate_panel(&cfg, 31).unwrap();
    let xi = Xi::estimate(&panel, &cfg.true_spec(), false).unwrap();
    let sf = fit_simex(&panel, Family::Logistic, &xi, &quick(SimexMode::AverageProxies, 100, 2)).unwrap();
    for c in &sf.curves {
        if c.n < 500 {
            continue;
        }
        let slopes: Vec<f64> = c.estimates.iter().map(|e| e[1].abs()).collect();
        assert!(slopes.windows(2).all(|w| w[1] < w[0]), "{}: {slopes:?}", c.label);
    }
}

#[test]
fn monte_carlo_error_shrinks_with_replicates() {
    let cfg = ScenarioConfig::study1().with_n(500);
    let panel = generate_panel(&cfg, 3).unwrap();
    let xi = Xi::estimate(&panel, &cfg.true_spec(), false).unwrap();
    let small = fit_simex(&panel, Family::Linear, &xi, &quick(SimexMode::AverageEstimates, 25, 1)).unwrap();
    let large = fit_simex(&panel, Family::Linear, &xi, &quick(SimexMode::AverageEstimates, 400, 1)).unwrap();
    let ratio: f64 = {
        let s: f64 = small.curves[0].mc_se[4].iter().sum();
        let l: f64 = large.curves[0].mc_se[4].iter().sum();
        s / l
    };
    assert!((ratio / 4.0 - 1.0).abs() < 0.3, "ratio {ratio}");
}

fn study1_panel(n: usize, seed: u64) -> (ProxyPanel, Xi) {
    let cfg = ScenarioConfig::study1().with_n(n);
    let panel = generate_panel(&cfg, seed).unwrap();
    let xi = Xi::estimate(&panel, &cfg.true_spec(), false).unwrap();
    (panel, xi)
}

#[test]
fn fixed_seeds_are_reproducible_across_thread_counts() {
    let (panel, xi) = study1_panel(400, 6);
    let cfg = quick(SimexMode::AverageProxies, 30, 77);
    let a = fit_simex(&panel, Family::Linear, &xi, &cfg).unwrap();
    let b = fit_simex(&panel, Family::Linear, &xi, &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = pool.install(|| fit_simex(&panel, Family::Linear, &xi, &cfg).unwrap());
    assert_eq!(a.fit.theta, b.fit.theta);
    assert_eq!(a.fit.theta, c.fit.theta);
    let other = fit_simex(&panel, Family::Linear, &xi, &quick(SimexMode::AverageProxies, 30, 78)).unwrap();
    assert_ne!(a.fit.theta, other.fit.theta);
}

#[test]
fn pattern_groups_are_pooled_with_weights_summing_to_one() {
    let (panel, xi) = study1_panel(1500, 8);
    let sf = fit_simex_with_sandwich(&panel, Family::Linear, &xi, &quick(SimexMode::AverageProxies, 40, 3)).unwrap();
    assert_eq!(sf.curves.len(), panel.patterns().len());
    for t in 0..sf.fit.theta.len() {
        let s: f64 = sf.weights.iter().map(|w| w[t]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let se = sf.fit.se().unwrap();
    assert!(se.iter().all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn optimal_pooling_never_has_larger_sandwich_variance() {
    let (panel, xi) = study1_panel(1500, 9);
    let base = quick(SimexMode::AverageEstimates, 40, 3);
    let eq = fit_simex(&panel, Family::Linear, &xi, &base).unwrap();
    let opt_cfg = SimexConfig {
        combine: CombineRule::Optimal,
        ..base.clone()
    };
    let opt = fit_simex(&panel, Family::Linear, &xi, &opt_cfg).unwrap();
    assert!(opt.fit.flags.iter().all(|f| !f.contains("fell-back")), "{:?}", opt.fit.flags);
    let ve = simex_sandwich(&panel, &xi, &eq, &base).unwrap();
    let vo = simex_sandwich(&panel, &xi, &opt, &opt_cfg).unwrap();
    for t in 0..ve.nrows() {
        assert!(vo[(t, t)] <= ve[(t, t)] * (1.0 + 1e-9), "coef {t}");
    }
}

#[test]
fn quadratic_extrapolant_matches_its_population_limit() {
    // Linear model, normal X and errors: the population curve of the slope
    // is beta s / (s + (1 + lambda) m). A quadratic fitted to that curve on
    // the grid, evaluated at -1, is what the estimator converges to.
    let mut cfg = ScenarioConfig::study3().with_n(10_000);
    cfg.outcome.family = Family::Linear;
    cfg.outcome.coefficients = vec![1.0, 0.8];
    let panel = generate_panel(&cfg, 41).unwrap();
    let xi = Xi::estimate(&panel, &cfg.true_spec(), false).unwrap();
    let sc = SimexConfig {
        b_reps: 100,
        mode: SimexMode::AverageEstimates,
        extrapolant: ExtrapolantChoice::All(Extrapolant::Quadratic),
        combine: CombineRule::Fixed(vec![1.0, 0.0, 0.0]),
        seed: 12,
        ..SimexConfig::default()
    };
    let sf = fit_simex_with_sandwich(&panel, Family::Linear, &xi, &sc).unwrap();
    let grid = &sc.lambdas;
    let pop: Vec<f64> = grid.iter().map(|l| 0.8 * 1.0 / (1.0 + (1.0 + l) * 1.0)).collect();
    let limit = fit_extrapolant(grid, &pop, Extrapolant::Quadratic).unwrap().extrapolate().unwrap();
    let se = sf.fit.se().unwrap()[1];
    assert!((sf.fit.theta[1] - limit).abs() < 3.0 * se, "{} vs {limit} (se {se})", sf.fit.theta[1]);
    assert!((limit - 0.8).abs() > 0.02, "quadratic should leave residual bias");
}

#[test]
fn invalid_configurations_are_rejected() {
    let (panel, xi) = study1_panel(200, 1);
    let cfg = SimexConfig {
        lambdas: vec![0.0, 1.0],
        extrapolant: ExtrapolantChoice::All(Extrapolant::Quadratic),
        ..SimexConfig::default()
    };
    assert!(matches!(
        fit_simex(&panel, Family::Linear, &xi, &cfg),
        Err(MeError::Precondition(_))
    ));
    let cfg = SimexConfig {
        extrapolant: ExtrapolantChoice::PerCoefficient(vec![Extrapolant::Linear; 2]),
        b_reps: 5,
        ..SimexConfig::default()
    };
    assert!(matches!(fit_simex(&panel, Family::Linear, &xi, &cfg), Err(MeError::Config(_))));
}
