use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn turnover(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turnover")).args(args).output().unwrap()
}

fn config(dir: &Path, data: serde_json::Value) -> String {
    let cfg = serde_json::json!({
        "data": data,
        "model": { "layer_widths": [2, 16, 16, 2] },
        "train": { "learning_rate": 0.02, "momentum": 0.9, "batch_size": 10, "epochs": 15, "shuffle_seed": 1, "init_seed": 2 },
        "mask": { "global_seed": 3 }
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn separable() -> serde_json::Value {
    serde_json::json!({
        "kind": "synthetic",
        "generator": { "kind": "gaussian_blobs", "means": [[-2.0, -2.0], [2.0, 2.0]], "std": 0.5 },
        "n": 120, "seed": 1, "n_val": 20, "n_test": 20
    })
}

#[test]
fn analysis_before_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), separable());
    let out = dir.path().join("run");
    let o = turnover(&["influence", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("turnover train"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(turnover(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(turnover(&["train", "--config", "/nonexistent.json", "--out", "/tmp/x"]).status.code(), Some(1));
    assert_eq!(turnover(&["train"]).status.code(), Some(1));
    assert_eq!(turnover(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    fs::write(&csv, "1.0,2.0,0\n1.0,oops,1\n").unwrap();
    let cfg = config(dir.path(), serde_json::json!({ "kind": "csv", "path": csv }));
    let o = turnover(&["train", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));
}

#[test]
fn interpret_without_errors_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), separable());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert!(turnover(&["train", "--config", &cfg, "--out", out]).status.success());
    let o = turnover(&["interpret", "--out", out, "--top-k", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(Path::new(out).join("influence/interpret.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn seed_flag_changes_the_run_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), separable());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(turnover(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(turnover(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "99"]).status.success());
    assert_ne!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"][0]["seeds"]["init"], 99);
    assert_eq!(manifest["entries"][0]["command"], "train");
}
