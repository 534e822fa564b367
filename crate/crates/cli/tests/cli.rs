use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fae"))
        .args(args)
        .env_remove("FAE_SEED")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let out = fae(&[
        "synth", "--units", "4", "--lifetime", "60", "--drift", "5", "--seed", "3", "--out", path(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("synth.txt")
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", path(data), "--epochs", "2", "--out", path(out)];
    args.extend_from_slice(extra);
    fae(&args)
}

#[test]
fn train_detect_export_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("fixture"));
    let run = tmp.path().join("run1");
    let out = train(&data, &run, &["--latent", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.fae", "history.csv", "config.json", "provenance.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,split,score_match,reconstruction,stability,total\n"));
    assert_eq!(history.lines().filter(|l| l.contains(",train,")).count(), 2);
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["command"]["train"]["latent"], 3);

    let model = run.join("model.fae");
    let det = tmp.path().join("det");
    let out = fae(&["detect", "--model", path(&model), "--data", path(&data), "--percentile", "90", "--out", path(&det)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(det.join("report.csv")).unwrap();
    assert!(report.starts_with("row_index,unit,cycle,error,flagged,label\n"));
    assert_eq!(report.lines().count(), 1 + 4 * 60);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(det.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["percentile"], 90.0);
    assert_eq!(metrics["labeling"]["anomaly_window"], 30);
    assert!(metrics["metrics"]["precision"].is_number());
    assert!(metrics["threshold"].as_f64().unwrap() > 0.0);

    let lat = tmp.path().join("lat");
    let out = fae(&["export-latent", "--model", path(&model), "--data", path(&data), "--out", path(&lat)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let latent = fs::read_to_string(lat.join("latent.csv")).unwrap();
    assert!(latent.starts_with("row_index,unit,cycle,z1,z2,z3,label\n"));
}

#[test]
fn reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("fixture"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train(&data, &a, &[]).status.success());
    assert!(train(&data, &b, &[]).status.success());
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.fae")).unwrap(), fs::read(b.join("model.fae")).unwrap());
}

#[test]
fn seed_environment_override() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("fixture"));
    let run = tmp.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_fae"))
        .args(["train", "--data", path(&data), "--epochs", "1", "--out", path(&run)])
        .env("FAE_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["command"]["train"]["seed"], 99);
}

#[test]
fn vae_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("fixture"));
    let run = tmp.path().join("vae");
    assert!(train(&data, &run, &["--loss", "vae"]).status.success());
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    let first = history.lines().nth(1).unwrap();
    assert!(first.starts_with("1,train,0,"), "{first}");
}

#[test]
fn usage_errors_exit_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("neg");
    let out = fae(&["train", "--data", "x.txt", "--epochs", "-5", "--out", path(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.exists());

    assert_eq!(fae(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fae(&["train", "--bogus"]).status.code(), Some(2));
    let out = fae(&["train", "--data", "x.txt", "--batch", "0", "--out", path(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.exists());
}

#[test]
fn missing_file_exits_1_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fae(&["train", "--data", "/nonexistent/train_FD001.txt", "--out", path(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/train_FD001.txt"));
}

#[test]
fn verify_passes() {
    let out = fae(&["verify"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("pass") && !text.contains("FAIL"));
}
