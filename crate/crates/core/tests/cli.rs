use std::path::Path;
use std::process::{Command, Output};

fn semfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semfed"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        format!(
            r#"{{
  "dataset": {{"synthetic": {{"classes": 4, "n_per_class": 10, "semantic_dim": 8, "image_dim": 12, "text_dim": 10}}{extra}}},
  "federation": {{"n_clients": 2, "rounds": 2}},
  "adapter": {{"hidden": 8, "k_intra": 3, "k_cross": 3}},
  "train": {{"local_epochs": 2, "batch_size": 8}}
}}"#
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn grad_check_exit_codes() {
    let ok = semfed(&["grad-check"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("max relative error"));
    let bad = semfed(&["grad-check", "--perturb", "0.01"]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"mode": "proposed", "no_such_key": 1}"#).unwrap();
    let out = semfed(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&path, r#"{"federation": {"n_clients": 0}}"#).unwrap();
    let out = semfed(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn missing_feature_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        dir.path(),
        r#", "features": {"image": "nope.semf", "text": "nope.semf", "manifest": "nope.json"}"#,
    );
    let out = semfed(&["run", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn gen_data_run_eval_compare() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root, "");
    let data = root.join("data");
    assert!(semfed(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());
    for f in ["image.semf", "text.semf", "skb.bin", "manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    // Run once on the generated files, with checkpoints, and once from memory.
    let files = tiny_config(
        root,
        r#", "features": {"image": "data/image.semf", "text": "data/text.semf", "manifest": "data/manifest.json"}"#,
    );
    let with_ckpt = root.join("files.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files).unwrap()).unwrap();
    v["checkpoint_every"] = 1.into();
    std::fs::write(&with_ckpt, v.to_string()).unwrap();
    let a = root.join("a");
    let out = semfed(&["run", "--config", with_ckpt.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = tiny_config(root, "");
    let b = root.join("b");
    assert!(semfed(&["run", "--config", &cfg, "--seed", "1", "--rounds", "1", "--out", b.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read_to_string(b.join("metrics.csv")).unwrap().lines().count(), 3);

    let ckpt = a.join("checkpoints").join("round-0002.semc");
    assert!(ckpt.exists());
    assert!(a.join("checkpoints").join("ledger-round-0002-client-01.json").exists());
    let out = semfed(&["eval", "--config", with_ckpt.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["round"], 2);
    // The checkpoint scores what the run reported for its final round.
    let last = std::fs::read_to_string(a.join("metrics.csv")).unwrap().lines().last().unwrap().to_string();
    let final_rsum: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(report["rsum"].as_f64().unwrap(), final_rsum);

    let merged = root.join("compare.csv");
    let out = semfed(&["compare", "--out", merged.to_str().unwrap(), a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&merged).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("run,round,metric,value"));
    assert!(text.lines().any(|l| l.starts_with("a,2,rsum,")));
    assert!(text.lines().any(|l| l.starts_with("b,1,rsum,")));
}
