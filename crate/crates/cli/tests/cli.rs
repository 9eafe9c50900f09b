use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn run(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_prefalign")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, v: Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_SESSION: &str = r#"{"candidates": 8, "max_iterations": 3}"#;

#[test]
fn train_then_run_experiments() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let session: Value = serde_json::from_str(SMALL_SESSION).unwrap();
    let bench = serde_json::json!({"images": 2, "height": 24, "width": 24, "seeds": [0]});

    let data_cfg = write(root, "data.json", serde_json::json!({"images": 3, "height": 24, "width": 24}));
    run(&["gen-data", "--config", &data_cfg, "--seed", "3", "--out", &p("data")]);
    assert!(root.join("data").read_dir().unwrap().count() > 0);

    let train_cfg = write(
        root,
        "train.json",
        serde_json::json!({
            "train": {"epochs": 1, "batch_size": 2, "candidates": 4, "train_samples": 2, "rounds": 1,
                      "arch": {"components": 4, "latent_dim": 2, "embed_dim": 4, "encoder_hidden": 4, "adapter_hidden": 4}}
        }),
    );
    run(&["train", "--config", &train_cfg, "--data", &p("data"), "--out", &p("train")]);
    let s = summary(&root.join("train"));
    assert_eq!(s["experiment"], "train");
    assert_eq!(s["config"]["train"]["epochs"], 1);
    let hash = s["checkpoint_hash"].as_str().unwrap().to_string();
    assert!(root.join("train/losses.csv").exists());
    let ck = p("train/checkpoint.json");

    let sim = write(root, "sim.json", serde_json::json!({"bench": bench, "session": session}));
    run(&["simulate", "--config", &sim, "--checkpoint", &ck, "--out", &p("sim")]);
    assert_eq!(summary(&root.join("sim"))["checkpoint_hash"], hash.as_str());
    let csv = std::fs::read_to_string(root.join("sim/trajectories.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    let eff = write(
        root,
        "eff.json",
        serde_json::json!({"bench": bench, "session": session, "efficiency": {"targets": [0.8], "cap": 3, "failure_value": 10.0}}),
    );
    run(&["efficiency", "--config", &eff, "--checkpoint", &ck, "--out", &p("eff")]);
    let s = summary(&root.join("eff"));
    assert!(s["results"]["full"].is_array() && s["results"]["random_only"].is_array());

    let align = write(root, "align.json", serde_json::json!({"bench": bench, "session": session, "iterations": 2}));
    run(&["alignment", "--config", &align, "--checkpoint", &ck, "--seed", "4", "--out", &p("align")]);
    let s = summary(&root.join("align"));
    assert_eq!(s["config"]["bench"]["seeds"], serde_json::json!([4]));
    assert_eq!(s["results"]["clinicians"].as_array().unwrap().len(), 5);
}

#[test]
fn ablation_trains_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = root.join("abl");
    let cfg = write(
        root,
        "abl.json",
        serde_json::json!({
            "data": {"images": 2, "height": 20, "width": 20},
            "train": {"epochs": 1, "batch_size": 2, "candidates": 4, "train_samples": 2, "rounds": 1,
                      "arch": {"components": 4, "latent_dim": 2, "embed_dim": 4, "encoder_hidden": 4, "adapter_hidden": 4}},
            "bench": {"images": 1, "height": 20, "width": 20, "seeds": [0]},
            "session": {"candidates": 8},
            "iterations": 2
        }),
    );
    run(&["ablation", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let s = summary(&out);
    for name in ["random_only", "gauss_mean_var", "mixture_weights", "full"] {
        assert!(s["results"]["mean_dice"][name].is_number(), "{name}");
        assert!(out.join(format!("checkpoint_{name}.json")).exists());
    }
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", serde_json::json!({"train": {"epochs": "many"}}));
    let out = Command::new(env!("CARGO_BIN_EXE_prefalign"))
        .args(["train", "--config", &cfg, "--out", tmp.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("parsing"));
}
