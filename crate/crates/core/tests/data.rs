use meacorr::data::{generate_panel, read_panel, write_panel, PanelSchema, ProxyPanel, ScenarioConfig};
use meacorr::error::MeError;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn same_panel(a: &ProxyPanel, b: &ProxyPanel, tol: f64) {
    assert_eq!((a.n(), a.k(), a.p(), a.q()), (b.n(), b.k(), b.p(), b.q()));
    for i in 0..a.n() {
        assert!((a.y()[i] - b.y()[i]).abs() <= tol);
        for c in 0..a.q() {
            assert!((a.z()[(i, c)] - b.z()[(i, c)]).abs() <= tol);
        }
        for j in 0..a.k() {
            assert_eq!(a.observed(i, j), b.observed(i, j), "mask ({i},{j})");
            if a.observed(i, j) {
                for c in 0..a.p() {
                    let (u, v) = (a.value(i, j, c), b.value(i, j, c));
                    assert!((u - v).abs() <= tol * (1.0 + u.abs()), "({i},{j},{c}) {u} vs {v}");
                }
            }
        }
    }
}

fn roundtrip(panel: &ProxyPanel, schema: Option<&PanelSchema>) -> ProxyPanel {
    let mut buf = Vec::new();
    write_panel(panel, &mut buf, schema).unwrap();
    read_panel(buf.as_slice(), schema).unwrap()
}

#[test]
fn generated_panel_survives_a_csv_roundtrip() {
    let panel = generate_panel(&ScenarioConfig::study(1).unwrap().with_n(300), 8).unwrap();
    same_panel(&panel, &roundtrip(&panel, None), 0.0);
}

#[test]
fn cohort_readings_roundtrip_through_the_log_transform() {
    let cfg = ScenarioConfig::cohort().with_n(200);
    let panel = generate_panel(&cfg, 2).unwrap();
    let schema = PanelSchema::cohort();
    same_panel(&panel, &roundtrip(&panel, Some(&schema)), 1e-12);
}

#[test]
fn generated_proxies_have_their_design_moments() {
    let cfg = ScenarioConfig::study(1).unwrap().with_n(40_000);
    let panel = generate_panel(&cfg, 21).unwrap();
    let mu = cfg.true_mu_x();
    let n = panel.n() as f64;
    for (j, law) in cfg.proxies.iter().enumerate() {
        let rows: Vec<usize> = (0..panel.n()).filter(|&i| panel.observed(i, j)).collect();
        let m = rows.len() as f64;
        let frac = 1.0 - m / n;
        let sd = (law.missing * (1.0 - law.missing) / n).sqrt();
        assert!((frac - law.missing).abs() <= 4.0 * sd + 1e-12, "proxy {j} missing {frac}");
        let err = cfg.true_m(j);
        for c in 0..panel.p() {
            let v: Vec<f64> = rows.iter().map(|&i| panel.value(i, j, c)).collect();
            let mean = v.iter().sum::<f64>() / m;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
            let e1 = law.eta1[c];
            let want_mean = law.eta0[c] + e1 * mu[c];
            let want_var = e1 * e1 * cfg.x.cov[c][c] + err[(c, c)];
            assert!((mean - want_mean).abs() < 4.0 * (want_var / m).sqrt(), "proxy {j} comp {c} mean {mean}");
            assert!(
                (var - want_var).abs() < 4.0 * want_var * (2.0 / m).sqrt(),
                "proxy {j} comp {c} var {var} want {want_var}"
            );
        }
    }
}

#[test]
fn every_subject_observes_some_proxy() {
    let panel = generate_panel(&ScenarioConfig::study(2).unwrap().with_n(2000), 3).unwrap();
    assert!((0..panel.n()).all(|i| panel.kappa(i) >= 1));
}

#[test]
fn unknown_study_is_a_config_error() {
    assert!(matches!(ScenarioConfig::study(0), Err(MeError::Config(_))));
    assert!(matches!(ScenarioConfig::study(4), Err(MeError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn arbitrary_panels_roundtrip(
        n in 1usize..12,
        k in 1usize..4,
        p in 1usize..3,
        q in 0usize..3,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let z = DMatrix::from_fn(n, q, |_, _| rng.random_range(-5.0..5.0));
        let proxies: Vec<DMatrix<f64>> = (0..k).map(|_| DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 1e-3 - 7.0)).collect();
        let mask: Vec<Vec<bool>> = (0..n)
            .map(|_| {
                let mut row: Vec<bool> = (0..k).map(|_| rng.random_bool(0.6)).collect();
                if !row.iter().any(|&b| b) {
                    row[0] = true;
                }
                row
            })
            .collect();
        let panel = ProxyPanel::new(y, z, proxies, &mask).unwrap();
        same_panel(&panel, &roundtrip(&panel, None), 0.0);
    }
}
