use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qml::config::ExperimentConfig;

fn qml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qml")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let mut c = ExperimentConfig::default();
    c.train.epochs = 2;
    let p = dir.join("config.json");
    fs::write(&p, c.to_json()).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn train_writes_all_artifacts_and_evaluate_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let o = qml(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.qml", "history.csv", "metrics.json", "config.json", "distances.csv", "resolved_config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.join("config.json")).unwrap(), fs::read_to_string(&cfg).unwrap());
    let trained = fs::read(out.join("metrics.json")).unwrap();
    let o = qml(&["evaluate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(out.join("metrics.json")).unwrap(), trained);
    let hist = fs::read_to_string(out.join("distances.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,same_class,different_class\n"));
    assert_eq!(hist.lines().count(), 41);
}

#[test]
fn invalid_config_fails_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"p": 1}}"#).unwrap();
    let out = tmp.path().join("never");
    let o = qml(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!out.exists());
    fs::write(&cfg, r#"{"tarin": {}}"#).unwrap();
    assert!(!qml(&["generate", "--config", cfg.to_str().unwrap(), "--dry-run"]).status.success());
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let o = qml(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--dry-run"]);
    assert!(o.status.success());
    assert!(!out.exists());
}

#[test]
fn generate_round_trips_through_feature_source() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let csv = tmp.path().join("feats.csv");
    assert!(qml(&["generate", "--config", &cfg, "--out", csv.to_str().unwrap()]).status.success());
    let mut c = ExperimentConfig::default();
    c.train.epochs = 2;
    c.data = qml::DataSource::Features("feats.csv".into());
    let fcfg = tmp.path().join("features.json");
    fs::write(&fcfg, c.to_json()).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(qml(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    let o = qml(&["train", "--config", fcfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
}

#[test]
fn ablation_requires_enough_cells_and_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    assert!(!qml(&["ablation", "--config", &cfg, "--variants", "raqua", "--seeds", "0,1,2"]).status.success());
    assert!(!qml(&["ablation", "--config", &cfg, "--variants", "raqua,comtri", "--seeds", "0,1"]).status.success());
    let out = tmp.path().join("abl");
    let o = qml(&[
        "ablation", "--config", &cfg, "--variants", "raqua,comtri-cls", "--seeds", "0,1,2", "--jobs", "2", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 6 + 2);
    assert!(summary.contains("comtri-cls,median,"));
    assert!(out.join("cells/raqua_seed2/metrics.json").exists());
}

#[test]
fn verify_passes_and_detects_a_perturbed_gradient() {
    assert!(qml(&["verify"]).status.success());
    let o = qml(&["verify", "--perturb-op", "matmul"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
