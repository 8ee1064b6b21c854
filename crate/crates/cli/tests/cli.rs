use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn meacorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meacorr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = meacorr(&[
            "simulate", "--study", "1", "--n", "300", "--reps", "3", "--methods", "naive,gen-rc-equal",
            "--seed", "9", "--out", s(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    // header plus two methods times four coefficients
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn bad_study_is_a_configuration_error() {
    let o = meacorr(&["simulate", "--study", "9", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_method_is_a_configuration_error() {
    let o = meacorr(&["simulate", "--study", "1", "--reps", "1", "--methods", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empirical_simex_is_rejected() {
    let o = meacorr(&["simulate", "--study", "1", "--n", "200", "--reps", "1", "--methods", "empirical-simex"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not implemented"));
}

#[test]
fn generated_panel_feeds_the_fitting_commands() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("p.csv");
    let o = meacorr(&["generate", "--study", "3", "--n", "800", "--seed", "2", "--out", s(&panel)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spec = dir.path().join("spec.json");
    let truth = meacorr::data::ScenarioConfig::study(3).unwrap().true_spec();
    fs::write(&spec, serde_json::to_string(&truth).unwrap()).unwrap();
    let common = ["--panel", s(&panel), "--spec", s(&spec), "--family", "logistic"];
    let with = |cmd: &str, extra: &[&str]| {
        let mut v = vec![cmd];
        v.extend(common);
        v.extend(extra);
        meacorr(&v)
    };

    let rc = with("fit-rc", &["--weights", "optimal"]);
    assert!(rc.status.success(), "{}", String::from_utf8_lossy(&rc.stderr));
    let fit: serde_json::Value = serde_json::from_slice(&rc.stdout).unwrap();
    assert_eq!(fit["theta"].as_array().unwrap().len(), 2);

    let curve = dir.path().join("curve.csv");
    let sx = with("fit-simex", &["--b", "10", "--curve-out", s(&curve)]);
    assert!(sx.status.success(), "{}", String::from_utf8_lossy(&sx.stderr));
    assert!(fs::read_to_string(&curve).unwrap().starts_with("unit,coefficient,lambda"));

    let mr = with("fit-mr", &[]);
    assert!(mr.status.success(), "{}", String::from_utf8_lossy(&mr.stderr));

    let diag = with("diagnose", &["--b", "10"]);
    assert!(diag.status.success(), "{}", String::from_utf8_lossy(&diag.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&diag.stdout).unwrap();
    assert!(rep["pairs"].as_array().is_some());
}

#[test]
fn moment_reconstruction_needs_a_binary_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("p.csv");
    assert!(meacorr(&["generate", "--study", "1", "--n", "200", "--out", s(&panel)]).status.success());
    let o = meacorr(&["fit-mr", "--panel", s(&panel)]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn analyze_rejects_a_spec_of_the_wrong_size() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("c.csv");
    let o = meacorr(&["generate", "--cohort", "--n", "600", "--out", s(&panel)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spec = dir.path().join("spec.json");
    let three = meacorr::data::ErrorModelSpec::all_unbiased(3);
    fs::write(&spec, serde_json::to_string(&three).unwrap()).unwrap();
    let o = meacorr(&[
        "analyze", "--panel", s(&panel), "--schema", "cohort", "--spec", s(&spec), "--methods", "naive",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_runs_a_cohort_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("c.csv");
    assert!(meacorr(&["generate", "--cohort", "--n", "1500", "--seed", "4", "--out", s(&panel)]).status.success());
    let table = dir.path().join("t.csv");
    let o = meacorr(&[
        "analyze", "--panel", s(&panel), "--scenario", "2", "--methods", "naive,gen-rc-equal",
        "--bootstrap", "30", "--out", s(&table),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["scenario"], 2);
    assert!(fs::read_to_string(&table).unwrap().lines().count() > 1);
}
