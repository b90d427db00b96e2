use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lagrangelab(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lagrangelab"))
        .args(args)
        .env("LAGRANGELAB_OUT", out_root)
        .output()
        .expect("spawn lagrangelab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn tasks_lists_the_registry() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lagrangelab(&["tasks"], tmp.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["chain-speed", "grid-hazard-small", "grid-hazard-dense", "grid-two-goal"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn oracle_prints_lambda_star_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lagrangelab(&["oracle", "--task", "chain-speed"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let star = doc["lambda_star"][0].as_f64().unwrap();
    assert!(star > 0.0);
    let bisection = doc["lambda_star_bisection"].as_f64().unwrap();
    assert!((star - bisection).abs() < 1e-6);
}

#[test]
fn oracle_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lagrangelab(&["oracle", "--task", "grid-hazard-dense", "--cost-limit", "0"], tmp.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("infeasible"));
    let o = lagrangelab(&["oracle", "--task", "no-such-task"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exact_profile_writes_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["profile", "--task", "chain-speed", "--grid", "0,0.5,1,2", "--seeds", "3", "--mode", "exact"];
    let o = lagrangelab(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("profile/chain-speed");
    let agg = fs::read_to_string(dir.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 4);
    assert!(dir.join("lambda-0.5_seed-2.csv").exists());
    let m = manifest(&dir.join("manifest.json"));
    assert_eq!(m["command"], "profile");
    assert_eq!(m["config"]["seeds"], serde_json::json!([0, 1, 2]));
    assert_eq!(m["config"]["train"]["mode"], "exact_dual");
}

#[test]
fn train_from_config_with_seed_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("train.json");
    fs::write(
        &cfg,
        r#"{"train": {"task": "grid-hazard-small", "epochs": 5, "steps_per_epoch": 500}}"#,
    )
    .unwrap();
    let o = lagrangelab(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("train/grid-hazard-small");
    assert!(dir.join("seed-7.csv").exists());
    assert!(dir.join("aggregate.csv").exists());
    let m = manifest(&dir.join("manifest.json"));
    assert_eq!(m["config"]["train"]["seed"], 7);
    // Keys absent from the input are echoed with their defaults.
    assert_eq!(m["config"]["train"]["clip_ratio"], 0.2);
    assert_eq!(m["config"]["train"]["controller"]["eta"], 0.035);
}

#[test]
fn malformed_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\n  \"train\": {\n    \"learning_rat\": 0.1\n  }\n}\n").unwrap();
    let o = lagrangelab(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("learning_rat"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn invalid_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lagrangelab(&["sweep", "--task", "chain-speed"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--limits"));
    let cfg = tmp.path().join("clip.json");
    fs::write(&cfg, r#"{"train": {"clip_ratio": 1.5}}"#).unwrap();
    let o = lagrangelab(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_reports_table_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["compare", "--task", "grid-hazard-small", "--seeds", "2", "--epochs", "20", "--steps-per-epoch", "500"];
    let o = lagrangelab(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("compare/grid-hazard-small");
    let agg = fs::read_to_string(dir.join("aggregate.csv")).unwrap();
    let mut lines = agg.lines();
    assert_eq!(lines.next().unwrap(), "method,seed,best_epoch,best_return,violation_rate,lambda_std");
    let methods: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["ga", "pid", "ga", "ga", "pid", "pid"]);
    // The published PID gains are the default second arm.
    let m = manifest(&dir.join("manifest.json"));
    assert_eq!(m["config"]["pid"]["kind"], "pid");
    assert_eq!(m["config"]["pid"]["kp"], 1e-4);
    assert_eq!(m["config"]["pid"]["ki"], 1e-4);
    assert_eq!(m["config"]["pid"]["kd"], 0.0);
    assert!(stdout(&o).contains("violation_rate"));
}

#[test]
fn manifest_rerun_reproduces_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("a");
    let args = [
        "--out", first.to_str().unwrap(), "sweep", "--task", "chain-speed", "--limits", "10,20",
        "--seeds", "2", "--epochs", "10", "--steps-per-epoch", "500",
    ];
    assert!(lagrangelab(&args, tmp.path()).status.success());
    let second = tmp.path().join("b");
    let m = first.join("sweep/chain-speed/manifest.json");
    let o = lagrangelab(&["--out", second.to_str().unwrap(), "sweep", "--manifest", m.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for file in ["aggregate.csv", "limit-10_seed-0.csv", "limit-20_seed-1.csv"] {
        assert_eq!(
            fs::read(first.join("sweep/chain-speed").join(file)).unwrap(),
            fs::read(second.join("sweep/chain-speed").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn manifest_of_another_command_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["profile", "--task", "chain-speed", "--grid", "0,1", "--seeds", "1", "--mode", "exact", "--epochs", "2"];
    assert!(lagrangelab(&args, tmp.path()).status.success());
    let m = tmp.path().join("profile/chain-speed/manifest.json");
    let o = lagrangelab(&["train", "--manifest", m.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("profile"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["train", "--task", "chain-speed", "--mode", "exact", "--epochs", "3"];
    assert!(lagrangelab(&args, tmp.path()).status.success());
    assert!(tmp.path().join("train/chain-speed/manifest.json").exists());
}

#[test]
fn help_lists_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["train", "profile", "sweep", "compare", "oracle"] {
        let o = lagrangelab(&[cmd, "--help"], tmp.path());
        assert!(o.status.success());
        let text = stdout(&o);
        assert!(text.contains("--workers") || cmd == "oracle", "{cmd}");
        assert!(text.contains("[default:"), "{cmd}");
    }
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    // A penalty this large overflows the advantages on the first update.
    let args = [
        "train", "--task", "chain-speed", "--controller", "fixed", "--lambda", "1e308",
        "--epochs", "5", "--steps-per-epoch", "500",
    ];
    let o = lagrangelab(&args, tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    // The partial run is still written for inspection.
    assert!(tmp.path().join("train/chain-speed/seed-0.csv").exists());
}
