//! End-to-end runs of the `ace` binary.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use ace_cli::advise::Advisor;
use ace_core::acquisition::select_scenario3;
use serde_json::Value;

fn ace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ace"))
        .args(args)
        .env_remove("ACE_SEED")
        .output()
        .expect("binary runs")
}

fn ace_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_ace"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--scenario", "s3", "--reps", "2", "--n", "10", "--n-pool", "30", "--n-test", "20", "--n-init", "3",
    "--restarts", "2", "--refit-restarts", "1", "--refit-interval", "3",
];

fn simulate(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", out.to_str().unwrap()]);
    ace(&args)
}

#[test]
fn unknown_method_is_a_usage_error_naming_the_flag() {
    let o = ace(&["simulate", "--method", "ace,bogus", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--method"), "{}", stderr(&o));
}

#[test]
fn bad_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "scenario = \"s2a\"\nrepz = 3\n").unwrap();
    let o = ace(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("repz"));

    fs::write(&cfg, "scenario = \"s1\"\nn_init = 0\n").unwrap();
    let o = ace(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_init"), "{}", stderr(&o));
}

#[test]
fn reruns_are_byte_identical_and_manifests_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(simulate(&a, &["--seed", "4", "--threads", "1"]).status.success());
    assert!(simulate(&b, &["--seed", "4", "--threads", "2"]).status.success());
    let replay = ace(&["simulate", "--config", a.join("manifest.json").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(replay.status.success(), "{}", stderr(&replay));
    for f in ["replications.csv", "aggregate.csv"] {
        let first = fs::read(a.join(f)).unwrap();
        assert_eq!(first, fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(first, fs::read(c.join(f)).unwrap(), "{f}");
    }
    let m: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let m2: Value = serde_json::from_slice(&fs::read(c.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["seeds"], serde_json::json!([4, 5]));
    assert_ne!(m["config"]["output"], m2["config"]["output"]);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let mut args = vec!["simulate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", out.to_str().unwrap(), "--method", "random"]);
    let o = Command::new(env!("CARGO_BIN_EXE_ace")).args(&args).env("ACE_SEED", "17").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let m: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"], serde_json::json!([17, 18]));
}

#[test]
fn report_renders_results_and_rejects_empty_directories() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = ace(&["report", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("aggregate.csv"));

    let res = dir.path().join("res");
    assert!(simulate(&res, &["--seed", "1"]).status.success());
    let o = ace(&["report", res.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Scenario 3"));
    assert!(res.join("report.txt").exists());
    assert!(res.join("s3_ite_quantiles.csv").exists());
}

#[test]
fn truth_reports_both_routes() {
    let o = ace(&["truth", "--weight", "ato", "--n", "20000", "--seed", "3", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let mc = v["monte_carlo"]["estimate"].as_f64().unwrap();
    assert!((mc - 0.0623).abs() < 0.01);
    assert!(v["test_set_plug_in"].as_f64().is_some());
    assert!(v["z"].as_f64().unwrap() >= 0.0);
}

#[test]
fn advise_sessions_resume_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("study.json");
    let s = session.to_str().unwrap();
    let o = ace(&["advise", "--init", "--session", s, "--scenario", "s3", "--pool-uniform", "40", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("study.pool.csv").exists());

    let pool = fs::read_to_string(dir.path().join("study.pool.csv")).unwrap();
    let row = |i: usize| -> String {
        let line = pool.lines().nth(i + 1).unwrap();
        format!("[{line}]")
    };
    let mut script = String::new();
    for (i, (a, y)) in [(0, 0.1), (1, 0.4), (0, 0.2), (1, 0.6), (0, 0.15), (1, 0.5)].iter().enumerate() {
        script += &format!("{{\"op\":\"observe\",\"x\":{},\"a\":{a},\"y\":{y},\"unit_index\":{}}}\n", row(i), i);
    }
    let o = ace_stdin(&["advise", "--session", s], &script);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<Value> = String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|v| v["ok"] == true), "{lines:?}");

    let first = ace_stdin(&["advise", "--session", s], "{\"op\":\"recommend\"}\n");
    let second = ace_stdin(&["advise", "--session", s], "{\"op\":\"recommend\"}\n");
    assert_eq!(first.stdout, second.stdout);
    let rec: Value = serde_json::from_slice(&first.stdout).unwrap();

    let adv = Advisor::load(&session).unwrap();
    let mut ucb = adv.ucb().unwrap();
    let pick = select_scenario3(&adv.model().unwrap(), adv.pool().unwrap(), &adv.propensity().unwrap(), &mut ucb).unwrap();
    assert_eq!(rec["unit_index"].as_u64().unwrap() as usize, pick.index);
    assert_eq!(rec["t"].as_u64().unwrap(), 7);

    let bad = ace_stdin(&["advise", "--session", s], "{\"op\":\"observe\",\"x\":[0.5],\"a\":1,\"y\":0}\n");
    let v: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert!(v["error"].is_string());
    assert_eq!(Advisor::load(&session).unwrap().session.step, 6);
}
