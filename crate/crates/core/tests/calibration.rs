mod common;

use common::{error_free_panel, random_design, symmetrised_panel, Truth};
use meacorr::calibration::{
    build_blup, calibrate, fit_rc, fit_rc_with_sandwich, optimal_alpha, pattern_frequencies, rc_stacked_system,
    standard_rc, weighted_mse, weighted_mse_gradient, WeightMode,
};
use meacorr::correction::Xi;
use meacorr::data::{generate_panel, ErrorModelSpec, Pattern, ProxySpec, ScenarioConfig};
use meacorr::outcome::{fit_known, Family};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn scalar_truth(m: &[f64]) -> Truth {
    let k = m.len();
    Truth {
        mu_x: DVector::from_element(1, 0.0),
        sigma_xx: DMatrix::from_element(1, 1, 1.0),
        eta0: vec![DVector::zeros(1); k],
        eta1: vec![DVector::from_element(1, 1.0); k],
        m: m.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
        sigma_zx: DMatrix::zeros(0, 1),
        mu_z: DVector::zeros(0),
        sigma_zz: DMatrix::zeros(0, 0),
    }
}

fn population_xi(truth: &Truth, spec: &ErrorModelSpec, with_z: bool) -> Xi {
    Xi::from_raw(truth.population_moments(), spec, with_z).unwrap()
}

#[test]
fn single_proxy_predictor_is_shrinkage() {
    let xi = population_xi(&scalar_truth(&[1.0, 0.5]), &ErrorModelSpec::all_unbiased(2), false);
    let b = build_blup(&xi, &[0.5, 0.5], Pattern::from_members(&[0])).unwrap();
    assert_eq!(b.weights, vec![1.0, 0.0]);
    assert!((b.beta[(0, 0)] - 0.5).abs() < 1e-12);
    assert!(b.mu[0].abs() < 1e-12);
}

#[test]
fn error_free_predictor_is_identity() {
    let mut truth = scalar_truth(&[0.0, 0.0, 0.0]);
    truth.mu_x[0] = 3.0;
    truth.eta0[2][0] = 1.0;
    truth.eta1[2][0] = 2.0;
    let spec = ErrorModelSpec {
        proxies: vec![ProxySpec::unbiased(), ProxySpec::unbiased(), ProxySpec::unrestricted()],
    };
    let xi = population_xi(&truth, &spec, false);
    let b = build_blup(&xi, &[0.0, 0.0, 1.0], Pattern::full(3)).unwrap();
    // X* = 1 + 2X, so X = (X* - 1)/2.
    assert!((b.beta[(0, 0)] - 0.5).abs() < 1e-12);
    assert!((b.mu[0] + 0.5).abs() < 1e-12);
}

#[test]
fn exchangeable_proxies_get_equal_weights() {
    let xi = population_xi(&scalar_truth(&[0.7, 0.7]), &ErrorModelSpec::all_unbiased(2), false);
    let s = optimal_alpha(&xi, &[(Pattern::full(2), 1.0)]).unwrap();
    assert!((s.alpha[0] - 0.5).abs() < 1e-8, "{:?}", s.alpha);
}

#[test]
fn optimal_weights_are_inverse_variance() {
    let xi = population_xi(&scalar_truth(&[0.5, 1.0]), &ErrorModelSpec::all_unbiased(2), false);
    let pats = [(Pattern::full(2), 1.0)];
    let s = optimal_alpha(&xi, &pats).unwrap();
    assert!(s.converged);
    assert!((s.alpha[0] - 2.0 / 3.0).abs() < 1e-7, "{:?}", s.alpha);
    // Grid search agrees.
    let mut best = (f64::INFINITY, 0.0);
    for t in 0..=3000 {
        let a = t as f64 / 3000.0;
        let m = weighted_mse(&xi, &[a, 1.0 - a], &pats).unwrap();
        if m < best.0 {
            best = (m, a);
        }
    }
    assert!((best.1 - 2.0 / 3.0).abs() < 1e-3);
    assert!(s.mse <= best.0 + 1e-12);
}

#[test]
fn weight_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let with_z = seed % 2 == 0;
        let (truth, spec) = random_design(seed, 3, 2, with_z);
        let xi = population_xi(&truth, &spec, with_z);
        let pats = [
            (Pattern::full(3), 0.5),
            (Pattern::from_members(&[0, 2]), 0.3),
            (Pattern::from_members(&[1]), 0.2),
        ];
        let a = [0.2, 0.5, 0.3];
        let g = weighted_mse_gradient(&xi, &a, &pats).unwrap();
        for m in 0..3 {
            let h = 1e-6;
            let mut up = a;
            let mut dn = a;
            up[m] += h;
            dn[m] -= h;
            let fd = (weighted_mse(&xi, &up, &pats).unwrap() - weighted_mse(&xi, &dn, &pats).unwrap()) / (2.0 * h);
            assert!((fd - g[m]).abs() < 1e-6 * (1.0 + fd.abs()), "seed {seed} m {m}: {fd} vs {}", g[m]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn optimal_weights_never_lose_to_equal(seed in 0u64..5000, k in 2usize..5, p in 1usize..3, with_z in any::<bool>()) {
        let (truth, spec) = random_design(seed, k, p, with_z);
        let xi = population_xi(&truth, &spec, with_z);
        let pats = [(Pattern::full(k), 0.6), (Pattern::from_members(&[0, k - 1]), 0.4)];
        let s = optimal_alpha(&xi, &pats).unwrap();
        let eq = weighted_mse(&xi, &vec![1.0 / k as f64; k], &pats).unwrap();
        prop_assert!(s.mse <= eq + 1e-12);
        prop_assert!((s.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.alpha.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn predictor_is_affine(seed in 0u64..5000) {
        let cfg = ScenarioConfig::study1().with_n(200);
        let panel = generate_panel(&cfg, seed).unwrap();
        let xi = Xi::estimate(&panel, &ErrorModelSpec::all_unbiased(3), false).unwrap();
        let b = build_blup(&xi, &[0.3, 0.3, 0.4], Pattern::full(3)).unwrap();
        prop_assert!((b.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Midpoint of two subjects' proxies maps to the midpoint of their predictions.
        let rows: Vec<usize> = (0..panel.n()).filter(|&i| panel.pattern(i) == Pattern::full(3)).take(2).collect();
        let mid = panel.select_rows(&rows);
        let x0 = b.combined(&mid, 0);
        let x1 = b.combined(&mid, 1);
        let avg = (&b.predict(&mid, 0) + &b.predict(&mid, 1)) / 2.0;
        let direct = &b.mu + &b.beta * ((x0 + x1) / 2.0);
        prop_assert!((avg - direct).amax() < 1e-10);
    }
}

#[test]
fn error_free_calibration_reduces_to_known_covariate_fit() {
    for family in [Family::Linear, Family::Logistic] {
        let panel = error_free_panel(400, family, 3);
        let truth_fit = fit_known(family, panel.y(), panel.proxy(0), panel.z(), "true").unwrap();
        for has_z in [false, true] {
            let xi = Xi::estimate(&panel, &ErrorModelSpec::all_unbiased(3), has_z).unwrap();
            for mode in [WeightMode::Equal, WeightMode::Optimal] {
                let rc = fit_rc_with_sandwich(&panel, family, &xi, mode).unwrap();
                for (a, b) in rc.fit.theta.iter().zip(&truth_fit.theta) {
                    assert!((a - b).abs() < 1e-8, "{family:?} {mode:?}: {a} vs {b}");
                }
                if family == Family::Linear {
                    let (c1, c2) = (rc.fit.cov_matrix().unwrap(), truth_fit.cov_matrix().unwrap());
                    let rel = (&c1 - &c2).amax() / c2.amax();
                    assert!(rel < 1e-6, "{mode:?} has_z={has_z} sandwich rel diff {rel}");
                }
            }
        }
    }
}

#[test]
fn stacked_jacobian_is_block_upper_triangular() {
    let cfg = ScenarioConfig::study1().with_n(300);
    let panel = generate_panel(&cfg, 2).unwrap();
    let xi = Xi::estimate(&panel, &ErrorModelSpec::all_unbiased(3), false).unwrap();
    for mode in [WeightMode::Equal, WeightMode::Optimal] {
        let rc = fit_rc(&panel, Family::Linear, &xi, mode).unwrap();
        let sys = rc_stacked_system(&panel, &xi, &rc).unwrap();
        let a = sys.a();
        let d = rc.fit.theta.len();
        for r in d..a.nrows() {
            for c in 0..d {
                assert_eq!(a[(r, c)], 0.0);
            }
        }
        let lay_xi = a.ncols() - xi.layout.len();
        for r in (a.nrows() - xi.layout.len())..a.nrows() {
            for c in 0..lay_xi {
                assert_eq!(a[(r, c)], 0.0);
            }
        }
    }
}

#[test]
fn exchangeable_complete_replicates_reproduce_textbook_calibration() {
    for with_z in [false, true] {
        let panel = symmetrised_panel(150, with_z, 9);
        let xi = Xi::estimate(&panel, &ErrorModelSpec::all_unbiased(3), with_z).unwrap();
        let gen = fit_rc(&panel, Family::Linear, &xi, WeightMode::Equal).unwrap();
        let (std_fit, std_x) = standard_rc(&panel, Family::Linear).unwrap();
        assert!((&gen.xhat - std_x).amax() < 1e-10);
        for (a, b) in gen.fit.theta.iter().zip(&std_fit.theta) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn declared_shift_leaves_fit_unchanged() {
    let cfg = ScenarioConfig::study1().with_n(800);
    let panel = generate_panel(&cfg, 4).unwrap();
    let spec = ErrorModelSpec::all_unbiased(3);
    let xi = Xi::estimate(&panel, &spec, false).unwrap();
    let c = [2.0, -1.0, 0.5];
    let shifted = panel.affine_proxy(2, &c, &[1.0; 3]);
    let mut spec2 = spec.clone();
    spec2.proxies[2] = ProxySpec {
        in_j0: false,
        eta0: Some(c.iter().map(|v| -v).collect()),
        ..ProxySpec::unbiased()
    };
    let xi2 = Xi::estimate(&shifted, &spec2, false).unwrap();
    for mode in [WeightMode::Equal, WeightMode::Optimal] {
        let a = fit_rc(&panel, Family::Linear, &xi, mode).unwrap();
        let b = fit_rc(&shifted, Family::Linear, &xi2, mode).unwrap();
        assert!((&a.xhat - &b.xhat).amax() < 1e-9);
        for (u, v) in a.fit.theta.iter().zip(&b.fit.theta) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn patterns_are_calibrated_independently() {
    let cfg = ScenarioConfig::study1().with_n(600);
    let panel = generate_panel(&cfg, 6).unwrap();
    let xi = Xi::estimate(&panel, &ErrorModelSpec::all_unbiased(3), false).unwrap();
    let alpha = [0.2, 0.3, 0.5];
    let pats = pattern_frequencies(&panel);
    let blups: Vec<_> = pats.iter().map(|&(p, _)| build_blup(&xi, &alpha, p).unwrap()).collect();
    let full = calibrate(&panel, &blups).unwrap();
    let drop = pats[0].0;
    let keep: Vec<usize> = (0..panel.n()).filter(|&i| panel.pattern(i) != drop).collect();
    let sub = panel.select_rows(&keep);
    let rest: Vec<_> = pats[1..].iter().map(|&(p, _)| build_blup(&xi, &alpha, p).unwrap()).collect();
    let part = calibrate(&sub, &rest).unwrap();
    for (r, &i) in keep.iter().enumerate() {
        assert_eq!(part.row(r), full.row(i));
    }
}

#[test]
fn normal_linear_model_is_consistent() {
    let cfg = ScenarioConfig::study1().with_n(100_000);
    let panel = generate_panel(&cfg, 17).unwrap();
    let xi = Xi::estimate(&panel, &ErrorModelSpec::all_unbiased(3), false).unwrap();
    let rc = fit_rc_with_sandwich(&panel, Family::Linear, &xi, WeightMode::Equal).unwrap();
    let se = rc.fit.se().unwrap();
    for (t, (est, want)) in rc.fit.theta.iter().zip(&cfg.outcome.coefficients).enumerate() {
        assert!((est - want).abs() < 3.0 * se[t], "coef {t}: {est} vs {want} (se {})", se[t]);
    }
}

#[test]
fn textbook_calibration_is_biased_under_unequal_errors() {
    let cfg = ScenarioConfig::study1().with_n(50_000);
    let panel = generate_panel(&cfg, 1).unwrap();
    let xi = Xi::estimate(&panel, &ErrorModelSpec::all_unbiased(3), false).unwrap();
    let gen = fit_rc(&panel, Family::Linear, &xi, WeightMode::Equal).unwrap();
    let (std_fit, _) = standard_rc(&panel, Family::Linear).unwrap();
    let truth = &cfg.outcome.coefficients;
    for t in [2, 3] {
        assert!((std_fit.theta[t] - truth[t]).abs() > (gen.fit.theta[t] - truth[t]).abs());
    }
}
