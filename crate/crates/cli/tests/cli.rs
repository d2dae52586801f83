use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scalar-ebm"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(sub: &str, config: Option<&Path>, out: &Path, extra: &[&str]) -> Output {
    let mut c = bin();
    c.arg(sub).arg("--out").arg(out);
    if let Some(cfg) = config {
        c.arg("--config").arg(cfg);
    }
    c.args(extra).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_TRAIN: &str = r#"{
    "preset": "eight_gaussians",
    "train": {"steps": 40, "batch_size": 32, "widths": [2, 8, 8, 1], "learning_rate": 0.01}
}"#;

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL_TRAIN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run("train", Some(&cfg), out, &["--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["config_echo.json", "seed", "version", "energy.json", "energy.params.bin", "energy_train_report.json", "energy_loss_curve.csv", "dataset.csv"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(a.join("seed")).unwrap().trim(), "7");
    for f in ["energy.params.bin", "energy_train_report.json", "energy_loss_curve.csv", "dataset.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report = json(&a.join("energy_train_report.json"));
    assert_eq!(report["loss_curve"].as_array().unwrap().len(), 40);
    let echo = json(&a.join("config_echo.json"));
    assert_eq!(echo["seed"], 7);
}

#[test]
fn missing_dataset_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let o = run("train", None, &tmp.path().join("r"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"train": {"stepz": 3}}"#);
    let o = run("train", Some(&cfg), &tmp.path().join("r"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
}

#[test]
fn unknown_preset_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = run("sample", None, &tmp.path().join("r"), &["--preset", "nine_gaussians"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_numerical_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"preset": "eight_gaussians", "train": {"steps": 50, "batch_size": 16, "widths": [2, 8, 1], "learning_rate": 1e6}}"#,
    );
    let o = run("train", Some(&cfg), &tmp.path().join("r"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn stride_beyond_steps_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"preset": "ou", "stop_scan": {"steps": 10, "snapshot_stride": 20}}"#);
    let o = run("stop-scan", Some(&cfg), &tmp.path().join("r"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ou_stop_scan_finds_ln2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"preset": "ou", "stop_scan": {"steps": 120, "snapshot_stride": 5, "particles": 2000, "write_snapshots": false}}"#,
    );
    let out = tmp.path().join("r");
    let o = run("stop-scan", Some(&cfg), &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out.join("stopping_report.json"));
    let tau = r["tau_det"]["time"].as_f64().unwrap();
    // 2000 particles leave a few percent of Monte Carlo error in R.
    assert!((tau - std::f64::consts::LN_2).abs() <= 0.05, "tau_det {tau}");
    assert_eq!(r["tau_lang"]["c_ls_certified"], true);
    assert_eq!(r["decay_check"]["passed"], true);
    let csv = fs::read_to_string(out.join("functionals_langevin.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,kl,fisher,mean_lap,mean_grad2,R");
    assert_eq!(csv.lines().count(), 1 + 120 / 5 + 1);
}

#[test]
fn sample_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"preset": "eight_gaussians", "seed": 3, "sample": {"steps": 20, "snapshot_stride": 10, "particles": 300}}"#,
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        assert!(run("sample", Some(&cfg), out, &[]).status.success());
    }
    for f in ["trajectory/snap_0.csv", "trajectory/snap_20.csv", "trajectory/trajectory.json", "step_stats.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn ood_rejects_empty_sets() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"preset": "eight_gaussians", "ood": {"sets": {}}}"#);
    let o = run("ood", Some(&cfg), &tmp.path().join("r"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(tmp.path(), "d.json", r#"{"preset": "eight_gaussians", "ood": {"sets": {"none": {"kind": "uniform", "count": 0}}}}"#);
    let o = run("ood", Some(&cfg), &tmp.path().join("s"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ood_writes_scores_and_aurocs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"preset": "eight_gaussians", "ood": {"id_count": 300,
            "sets": {"noise": {"kind": "uniform", "count": 300}},
            "barrier": {"unsafe_set": {"shape": "disc", "center": [0, 0], "radius": 0.5}, "beta": 0.05,
                        "particles": 500, "steps": 50}}}"#,
    );
    let out = tmp.path().join("r");
    let o = run("ood", Some(&cfg), &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("scores_noise.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "index,s1,s2,s3");
    assert_eq!(csv.lines().count(), 301);
    let a = json(&out.join("auroc.json"));
    let s2 = a["auroc"]["s2"]["noise"]["higher_is_ood"].as_f64().unwrap();
    assert!(s2 > 0.5 && s2 <= 1.0, "{s2}");
    let b = json(&out.join("barrier.json"));
    assert_eq!(b["values"].as_array().unwrap().len(), 6);
}

#[test]
fn diagnose_reports_the_sign_change() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r");
    let o = run("diagnose", None, &out, &["--preset", "eight_gaussians"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out.join("diagnose.json"));
    assert_eq!(r["sign_change"], true);
    assert!(r["max_curl"].as_f64().unwrap() <= 1e-6);
    assert_eq!(r["min_hessian"]["certified"], false);
}

#[test]
fn compose_from_energy_files() {
    let tmp = TempDir::new().unwrap();
    let a = write_config(
        tmp.path(),
        "a.json",
        r#"{"kind": "gaussian_mixture", "centers": [[3, 3], [3, -3], [-3, 3], [-3, -3]], "weights": [0.25, 0.25, 0.25, 0.25], "variance": 0.2}"#,
    );
    let b = write_config(
        tmp.path(),
        "b.json",
        r#"{"kind": "gaussian_mixture", "centers": [[0, 4], [0, -4], [4, 0], [-4, 0]], "weights": [0.25, 0.25, 0.25, 0.25], "variance": 0.2}"#,
    );
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &format!(
            r#"{{"preset": "fig2", "compose": {{"op": "negation", "operands": [{:?}, {:?}], "samples": 500, "steps": 300}}}}"#,
            a.display().to_string(),
            b.display().to_string()
        ),
    );
    let out = tmp.path().join("r");
    let o = run("compose", Some(&cfg), &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out.join("compose_report.json"));
    assert_eq!(r["coefficients"], serde_json::json!([-0.35, 1.0]));
    assert_eq!(r["separation"]["near_a"], 0);
    assert!(r["max_curl"].as_f64().unwrap() <= 1e-6);
    assert!(out.join("composed_energy.json").exists());
    assert_eq!(fs::read_to_string(out.join("samples.csv")).unwrap().lines().count(), 500);
}

#[test]
fn compose_needs_operands_with_a_dataset_preset() {
    let tmp = TempDir::new().unwrap();
    let o = run("compose", None, &tmp.path().join("r"), &["--preset", "eight_gaussians"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("operands"));
}
