use std::path::Path;
use std::process::{Command, Output};

use mmre::data::{DatasetBundle, SyntheticSpec};
use mmre::encoder::BackboneConfig;

fn mmre(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mmre")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "mmre {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("run");

    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, serde_json::to_string(&SyntheticSpec { n_samples: 60, ..Default::default() }).unwrap()).unwrap();
    mmre(&["gen-data", "--spec", path(&spec), "--out", path(&data)]);
    let bundle = DatasetBundle::load_dir(&data).unwrap();
    assert_eq!(bundle.train.len() + bundle.dev.len() + bundle.test.len(), 60);

    let config = dir.path().join("train.json");
    let body = serde_json::json!({
        "epochs": 1,
        "batch_size": 16,
        "backbone": BackboneConfig { model_dim: 16, ffn_dim: 32, ..Default::default() },
    });
    std::fs::write(&config, body.to_string()).unwrap();
    mmre(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&ckpt)]);

    let log = std::fs::read_to_string(ckpt.join(mmre::train::TRAIN_LOG_FILE)).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,l_d,l_s,l_c,total,lr"));
    assert_eq!(lines.count(), bundle.train.len().div_ceil(16));

    let predictions = dir.path().join("pred.jsonl");
    let report = json(&mmre(&[
        "eval",
        "--ckpt",
        path(&ckpt),
        "--data",
        path(&data),
        "--split",
        "test",
        "--macro",
        "--predictions",
        path(&predictions),
    ]));
    for key in ["accuracy", "precision", "recall", "f1"] {
        let v = report[key].as_f64().unwrap_or_else(|| panic!("missing {key}"));
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(std::fs::read_to_string(&predictions).unwrap().lines().count(), bundle.test.len());

    let id = &bundle.test.samples[0].id;
    let dump = json(&mmre(&["inspect", "--ckpt", path(&ckpt), "--id", id, "--data", path(&data)]));
    assert_eq!(dump["id"].as_str(), Some(id.as_str()));
    let probs: f64 = dump["masked_probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-9);
    assert!(dump["fusion"]["alpha"].is_array());
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = mmre(&["gradcheck", "--seed", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("max relative error"));
}

#[test]
fn bad_split_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mmre"))
        .args(["eval", "--ckpt", path(dir.path()), "--data", path(dir.path()), "--split", "nope"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
