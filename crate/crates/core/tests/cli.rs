use std::path::Path;
use std::process::{Command, Output};

use fsbo::harness::QuadraticFamily;
use fsbo::metadata::save_dataset;
use serde_json::Value;

fn fsbo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsbo")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(v["error"]["message"].is_string());
    v["error"].clone()
}

fn write_dataset(dir: &Path) {
    let fam = QuadraticFamily {
        tasks: 3,
        points: 25,
        dim: 2,
        ..QuadraticFamily::default()
    };
    save_dataset(&fam.generate().unwrap(), None, dir).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let out = fsbo(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "meta-train",
        "warmstart",
        "run",
        "benchmark",
        "sine-demo",
        "inspect-ckpt",
    ] {
        assert!(text.contains(sub), "{sub}");
    }
    let out = fsbo(&["benchmark", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["kind"], "usage");
    let out = fsbo(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_report_json_errors() {
    let out = fsbo(&["inspect-ckpt", "/nonexistent/ck.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["kind"], "io");
    let out = fsbo(&["benchmark", "--config", "/nonexistent/spec.json", "--out", "/tmp/never"]);
    assert_eq!(stderr_error(&out)["kind"], "io");
}

#[test]
fn train_warm_start_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data);
    let train_cfg = dir.path().join("train.json");
    std::fs::write(&train_cfg, r#"{"hidden": [8], "batch_size": 8}"#).unwrap();
    let ck = dir.path().join("ck/model.json");

    let v = stdout_json(&fsbo(&[
        "meta-train",
        "--dataset",
        s(&data),
        "--config",
        s(&train_cfg),
        "--iters",
        "15",
        "--exclude",
        "quad-00",
        "--out",
        s(&ck),
    ]));
    assert_eq!(v["tasks"], 2);
    assert_eq!(v["iterations"], 15);
    assert!(ck.exists());

    let v = stdout_json(&fsbo(&["inspect-ckpt", s(&ck)]));
    assert_eq!(v["input_dim"], 2);
    assert_eq!(v["hidden"], serde_json::json!([8]));
    assert_eq!(v["iterations_logged"], 15);

    let ws = dir.path().join("ws.json");
    let v = stdout_json(&fsbo(&[
        "warmstart",
        "--dataset",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--exclude",
        "quad-00",
        "--size",
        "2",
        "--steps",
        "50",
        "--out",
        s(&ws),
    ]));
    assert_eq!(v["candidates"], 25);
    let configs: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(&ws).unwrap()).unwrap();
    assert_eq!(configs.len(), 2);

    let run_dir = dir.path().join("run");
    let v = stdout_json(&fsbo(&[
        "run",
        "--dataset",
        s(&data),
        "--target",
        "quad-00",
        "--method",
        "fsbo",
        "--checkpoint",
        s(&ck),
        "--warm-start",
        s(&ws),
        "--budget",
        "6",
        "--out",
        s(&run_dir),
    ]));
    assert_eq!(v["trials"], 6);
    let trials = std::fs::read_to_string(run_dir.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 7);
    assert_eq!(
        trials.lines().next().unwrap(),
        "trial,config,objective,incumbent,normalized_regret"
    );

    let run_cfg = dir.path().join("run.json");
    std::fs::write(&run_cfg, r#"{"budget": 5, "lhs_size": 3}"#).unwrap();
    for method in ["random", "gp-lhs"] {
        let v = stdout_json(&fsbo(&[
            "run",
            "--dataset",
            s(&data),
            "--target",
            "quad-01",
            "--method",
            method,
            "--config",
            s(&run_cfg),
            "--seed",
            "3",
            "--out",
            s(&run_dir),
        ]));
        assert_eq!(v["trials"], 5);
    }

    let err = stderr_error(&fsbo(&[
        "run",
        "--dataset",
        s(&data),
        "--target",
        "quad-01",
        "--method",
        "simplex",
        "--out",
        s(&run_dir),
    ]));
    assert_eq!(err["kind"], "invalid_argument");
    let err = stderr_error(&fsbo(&[
        "run",
        "--dataset",
        s(&data),
        "--target",
        "quad-01",
        "--method",
        "fsbo",
        "--out",
        s(&run_dir),
    ]));
    assert_eq!(err["kind"], "invalid_argument");
    let err = stderr_error(&fsbo(&[
        "meta-train",
        "--dataset",
        s(&data),
        "--exclude",
        "nope",
        "--out",
        s(&ck),
    ]));
    assert_eq!(err["kind"], "invalid_argument");
}

#[test]
fn checkpoint_from_another_space_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data);
    let other = dir.path().join("other");
    let fam = QuadraticFamily {
        tasks: 2,
        points: 10,
        dim: 3,
        ..QuadraticFamily::default()
    };
    save_dataset(&fam.generate().unwrap(), None, &other).unwrap();
    let ck = dir.path().join("ck.json");
    stdout_json(&fsbo(&[
        "meta-train",
        "--dataset",
        s(&other),
        "--iters",
        "2",
        "--out",
        s(&ck),
    ]));
    let err = stderr_error(&fsbo(&[
        "warmstart",
        "--dataset",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&dir.path().join("ws.json")),
    ]));
    assert_eq!(err["kind"], "checkpoint");
}

const TINY_SPEC: &str = r#"{
  "dataset": {"synthetic": {"tasks": 2, "points": 20, "dim": 2}},
  "methods": ["random", "gp-lhs", "gp-ws", "fsbo"],
  "repeats": 1,
  "budget": 6,
  "report_trials": [3, 6],
  "lhs_size": 3,
  "train": {"outer_iterations": 10, "batch_size": 8, "hidden": [8]},
  "warm_start": {"set_size": 2, "population_size": 10, "steps": 50},
  "fine_tune_steps": 5
}"#;

#[test]
fn benchmark_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, TINY_SPEC).unwrap();
    let out = dir.path().join("results");
    let v = stdout_json(&fsbo(&[
        "benchmark",
        "--config",
        s(&spec),
        "--seed",
        "4",
        "--out",
        s(&out),
    ]));
    assert_eq!(v["summary"].as_array().unwrap().len(), 8);
    for f in ["report.csv", "summary.csv", "benchmark.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_dir(out.join("runs")).unwrap().count(), 8);
    assert_eq!(std::fs::read_dir(out.join("checkpoints")).unwrap().count(), 2);
}

#[test]
fn sine_demo_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sine.json");
    std::fs::write(
        &cfg,
        r#"{"trials": 2, "train": {"hidden": [8, 8], "kernel": "squared-exponential"}}"#,
    )
    .unwrap();
    let out = dir.path().join("sine");
    let v = stdout_json(&fsbo(&[
        "sine-demo",
        "--config",
        s(&cfg),
        "--tasks",
        "3",
        "--targets",
        "2",
        "--iters",
        "10",
        "--seed",
        "7",
        "--out",
        s(&out),
    ]));
    assert_eq!(v["targets"], 2);
    assert_eq!(v["evaluations"], 4);
    assert!(out.join("target_00_steps.csv").exists());
    assert!(out.join("target_01_trials.csv").exists());
}
