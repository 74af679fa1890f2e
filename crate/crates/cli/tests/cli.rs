//! End-to-end checks of the command-line interface: every subcommand runs
//! against files on disk, outputs carry the manifest hash, and reruns are
//! byte-identical.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coxsurf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn coxsurf")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("coxsurf-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_scenario(dir: &Path, n: usize) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("scenario.toml");
    std::fs::write(
        &path,
        format!(
            "n = {n}\n[surface]\nkind = \"damped-sine\"\ntime_frequency = 2.356194490192345\nmodifier_decay = 0.5\n"
        ),
    )
    .unwrap();
    path
}

fn simulate(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let scenario = write_scenario(dir, n);
    let data = dir.join("data.csv");
    let out = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        data.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn simulate_is_byte_identical_and_roundtrips() {
    let dir = tmp_dir("sim");
    let d1 = simulate(&dir.join("a"), 150, 7);
    let d2 = simulate(&dir.join("b"), 150, 7);
    assert_eq!(std::fs::read(&d1).unwrap(), std::fs::read(&d2).unwrap());
    // Truth tables exist alongside.
    assert!(dir.join("a").join("truth_surface.csv").exists());
    assert!(dir.join("a").join("truth.json").exists());
    assert!(dir.join("a").join("manifest.json").exists());
    // The first line carries the manifest hash.
    let text = std::fs::read_to_string(&d1).unwrap();
    assert!(text.starts_with("# manifest_hash="));
}

#[test]
fn simulate_requires_seed() {
    let dir = tmp_dir("sim-noseed");
    let scenario = write_scenario(&dir, 50);
    let out = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--seed"), "stderr: {err}");
}

#[test]
fn fit_produces_artifacts_with_default_k7() {
    let dir = tmp_dir("fit");
    let data = simulate(&dir, 500, 3);
    let fit_dir = dir.join("fit");
    let out = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--z-cols",
        "z1",
        "--w-cols",
        "w1",
        "--cause",
        "1",
        "--degree",
        "3",
        "--knots-t",
        "3",
        "--knots-x",
        "3",
        "--lambda0",
        "1e6",
        "--out-dir",
        fit_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("K=7"), "stdout: {stdout}");
    let artifact: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fit_dir.join("fit_cause1.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(artifact["layout"]["k_time"], 7);
    assert_eq!(artifact["layout"]["k_mod"], 7);
    assert_eq!(artifact["converged"], true);
    assert_eq!(artifact["gamma"].as_array().unwrap().len(), 49);
    assert!(fit_dir.join("baseline_cause1.csv").exists());
    assert!(fit_dir.join("manifest.json").exists());
}

#[test]
fn fit_without_z_cols_is_usage_error() {
    let dir = tmp_dir("fit-usage");
    let data = simulate(&dir, 60, 5);
    let out = run(&["fit", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn penalized_fit_records_exact_penalty_in_manifest() {
    let dir = tmp_dir("fit-pen");
    let data = simulate(&dir, 300, 9);
    let fit_dir = dir.join("fit");
    let out = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--z-cols",
        "z1",
        "--w-cols",
        "w1",
        "--degree",
        "2",
        "--knots-t",
        "2",
        "--knots-x",
        "2",
        "--penalty-mu",
        "0.2",
        "--penalty-mux",
        "0.5",
        "--lambda0",
        "1e6",
        "--out-dir",
        fit_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fit_dir.join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["resolved"]["penalty"][0], 0.2);
    assert_eq!(manifest["resolved"]["penalty"][1], 0.5);
    let artifact: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fit_dir.join("fit_cause1.json")).unwrap(),
    )
    .unwrap();
    assert!(artifact["penalized_log_likelihood"].is_number());
}

#[test]
fn test_subcommand_emits_expected_degrees_of_freedom() {
    let dir = tmp_dir("test");
    let data = simulate(&dir, 400, 11);
    let fit_dir = dir.join("fit");
    let out = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--z-cols",
        "z1",
        "--w-cols",
        "w1",
        "--degree",
        "2",
        "--degree-mod",
        "2",
        "--knots-t",
        "2",
        "--knots-x",
        "2",
        "--lambda0",
        "1e6",
        "--out-dir",
        fit_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = run(&[
        "test",
        "--fit",
        fit_dir.join("fit_cause1.json").to_str().unwrap(),
        "--out-dir",
        dir.join("test").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(dir.join("test").join("tests.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
    assert_eq!(lines.len(), 3);
    // K = K_mod = 5: df = 5*4, 5*4, 24.
    let df: Vec<i64> = lines
        .iter()
        .map(|l| l["null"]["df"].as_i64().unwrap())
        .collect();
    assert_eq!(df, vec![20, 20, 24]);
    for l in &lines {
        let p = l["p_value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn gray_construction_reports_eigenvalues() {
    let dir = tmp_dir("gray");
    let data = simulate(&dir, 400, 13);
    let fit_dir = dir.join("fit");
    let out = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--z-cols",
        "z1",
        "--w-cols",
        "w1",
        "--degree",
        "1",
        "--degree-mod",
        "1",
        "--knots-t",
        "1",
        "--knots-x",
        "1",
        "--penalty-mu",
        "1.0",
        "--penalty-mux",
        "1.0",
        "--lambda0",
        "1e6",
        "--out-dir",
        fit_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "test",
        "--fit",
        fit_dir.join("fit_cause1.json").to_str().unwrap(),
        "--kinds",
        "joint",
        "--constructions",
        "gray",
        "--out-dir",
        dir.join("test").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(dir.join("test").join("tests.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    let eigs = line["null"]["eigenvalues"].as_array().unwrap();
    assert_eq!(eigs.len(), 8); // joint df = K*Kmod - 1 = 8 for K = Kmod = 3
}

#[test]
fn cv_default_grid_has_25_points_and_requires_seed() {
    let dir = tmp_dir("cv");
    let data = simulate(&dir, 240, 17);
    let out = run(&[
        "cv",
        "--data",
        data.to_str().unwrap(),
        "--z-cols",
        "z1",
        "--w-cols",
        "w1",
        "--method",
        "gcv",
        "--folds",
        "3",
        "--grid-default",
        "--degree",
        "1",
        "--degree-mod",
        "1",
        "--knots-t",
        "1",
        "--knots-x",
        "1",
        "--lambda0",
        "1e6",
        "--seed",
        "23",
        "--out-dir",
        dir.join("cv").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("cv").join("cv_cause1_gcv.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["report"]["points"].as_array().unwrap().len(), 25);

    let out = run(&[
        "cv",
        "--data",
        data.to_str().unwrap(),
        "--z-cols",
        "z1",
        "--out-dir",
        dir.join("cv2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn predict_emits_full_grid() {
    let dir = tmp_dir("predict");
    let data = simulate(&dir, 300, 19);
    let fit_dir = dir.join("fit");
    let out = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--z-cols",
        "z1",
        "--w-cols",
        "w1",
        "--degree",
        "1",
        "--degree-mod",
        "1",
        "--knots-t",
        "1",
        "--knots-x",
        "1",
        "--lambda0",
        "1e6",
        "--out-dir",
        fit_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = run(&[
        "predict",
        "--fit",
        fit_dir.join("fit_cause1.json").to_str().unwrap(),
        "--t-grid",
        "0:30:100",
        "--x-grid",
        "0:50:100",
        "--out-dir",
        dir.join("pred").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("pred").join("surface.csv")).unwrap();
    // comment + header + 100 * 100 rows
    assert_eq!(text.lines().count(), 2 + 100 * 100);
}

#[test]
fn residuals_cover_every_record() {
    let dir = tmp_dir("resid");
    let data = simulate(&dir, 200, 29);
    let fit_dir = dir.join("fit");
    let out = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--z-cols",
        "z1",
        "--w-cols",
        "w1",
        "--degree",
        "1",
        "--degree-mod",
        "1",
        "--knots-t",
        "1",
        "--knots-x",
        "1",
        "--lambda0",
        "1e6",
        "--out-dir",
        fit_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = run(&[
        "residuals",
        "--fit",
        fit_dir.join("fit_cause1.json").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--kind",
        "martingale",
        "--out-dir",
        dir.join("resid").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("resid").join("residuals.csv")).unwrap();
    assert_eq!(text.lines().count(), 2 + 200);
    // Martingale residuals of the training fit sum to ~0.
    let sum: f64 = text
        .lines()
        .skip(2)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!(sum.abs() < 1e-6, "martingale sum {sum}");
}

#[test]
fn experiment_mode_writes_metrics_and_grids() {
    let dir = tmp_dir("experiment");
    let scenario = dir.join("scenario.toml");
    std::fs::write(
        &scenario,
        r#"
n = 250
[surface]
kind = "damped-sine"
time_frequency = 2.356194490192345
modifier_decay = 0.5

[experiment]
replicates = 2
metrics = ["imse", "coverage"]
grid_points = 20
time_slices = [15.0]
modifier_slices = [10.0]

[experiment.basis]
degree_time = 2
degree_mod = 2
interior_time = 1
interior_mod = 1

[experiment.solver]
lambda0 = 1e6
"#,
    )
    .unwrap();
    let out = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--seed",
        "31",
        "--experiment",
        "--threads",
        "2",
        "--out-dir",
        dir.join("exp").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "metrics.json",
        "estimation_event.csv",
        "estimation_calendar.csv",
        "slices.csv",
        "manifest.json",
    ] {
        assert!(dir.join("exp").join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("exp").join("metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(metrics["report"]["replicates_used"], 2);
}
