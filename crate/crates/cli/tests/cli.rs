use std::path::Path;
use std::process::{Command, Output};

const FAST_CONFIG: &str = r#"{
  "demo_counts": [16, 32],
  "num_seeds": 2,
  "methods": ["maxent_linear", "bnn"],
  "settings": {
    "maxent": {"max_iterations": 100},
    "bnn": {"bnn": {"epochs": 20}, "tabular": {"max_iterations": 100}}
  }
}"#;

fn lob_irl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lob-irl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) {
    std::fs::write(dir.join("config.json"), text).unwrap();
}

#[test]
fn show_config_prints_resolved_defaults() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "{}");
    let out = lob_irl(&["show-config", "--config", "config.json"], dir.path());
    assert!(out.status.success());
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(value["mdp"]["num_traders"], 3);
    assert_eq!(value["mdp"]["max_inventory"], 5);
    assert_eq!(value["mdp"]["temperatures"], serde_json::json!([0.1, 0.5, 1.0]));
    assert_eq!(value["demo_counts"], serde_json::json!([512, 1024, 2048, 4096, 8192, 16384]));
    assert_eq!(value["num_seeds"], 10);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), r#"{"mdp": {"temperatures": [0.1]}}"#);
    let out = lob_irl(&["show-config", "--config", "config.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperatures"));

    write_config(dir.path(), "{ not json");
    let out = lob_irl(&["show-config", "--config", "config.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    write_config(dir.path(), "{}");
    let out = lob_irl(&["fit", "--config", "config.json", "--method", "svm", "--demos", "d", "--out", "m"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "{}");
    let out = lob_irl(
        &["fit", "--config", "config.json", "--method", "gpirl", "--demos", "missing.txt", "--out", "m.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn demos_fit_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), FAST_CONFIG);
    let gen = lob_irl(
        &["gen-demos", "--config", "config.json", "--count", "64", "--seed", "5", "--out", "demos.txt"],
        dir.path(),
    );
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let again = lob_irl(
        &["gen-demos", "--config", "config.json", "--count", "64", "--seed", "5", "--out", "demos2.txt"],
        dir.path(),
    );
    assert!(again.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("demos.txt")).unwrap(),
        std::fs::read(dir.path().join("demos2.txt")).unwrap()
    );

    let fit = lob_irl(
        &["fit", "--config", "config.json", "--method", "maxent_linear", "--demos", "demos.txt", "--out", "model.json"],
        dir.path(),
    );
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));

    let eval = lob_irl(
        &["eval", "--config", "config.json", "--model", "model.json", "--mc-trajectories", "2000"],
        dir.path(),
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["method"], "maxent_linear");
    assert!(report["evd_exact"].as_f64().unwrap().is_finite());
    assert!(report["mc_stderr"].as_f64().unwrap() > 0.0);

    // A model fitted for one reward cannot be scored against another.
    write_config(dir.path(), r#"{"mdp": {"reward": {"kind": "exponential"}}}"#);
    let eval = lob_irl(&["eval", "--config", "config.json", "--model", "model.json"], dir.path());
    assert_eq!(eval.status.code(), Some(1));
}

fn strip_timings(csv: &str) -> String {
    csv.lines()
        .map(|l| l.split(',').take(7).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn bench_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), FAST_CONFIG);
    let mut outputs = Vec::new();
    for (workers, name) in [("1", "a.csv"), ("3", "b.csv")] {
        let out = Command::new(env!("CARGO_BIN_EXE_lob-irl"))
            .args(["bench", "--config", "config.json", "--out", name])
            .env("LOB_IRL_WORKERS", workers)
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read_to_string(dir.path().join(name)).unwrap());
    }
    assert_eq!(strip_timings(&outputs[0]), strip_timings(&outputs[1]));
    let lines: Vec<&str> = outputs[0].lines().collect();
    assert_eq!(lines[0], "method,reward_kind,demo_count,seed,evd_exact,evd_mc,mc_stderr,fit_seconds,eval_seconds");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    assert!(lines[1].starts_with("maxent_linear,linear,16,0,"));
    assert!(lines[8].starts_with("bnn,linear,32,1,"));
    assert!(dir.path().join("a.jsonl").exists());
    let baseline: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.baseline.json")).unwrap()).unwrap();
    assert!(baseline["uniform_policy_gap"].as_f64().unwrap() > 0.0);

    let bad = Command::new(env!("CARGO_BIN_EXE_lob-irl"))
        .args(["bench", "--config", "config.json", "--out", "c.csv"])
        .env("LOB_IRL_WORKERS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
