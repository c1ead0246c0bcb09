use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seeds = [0]

[trace.synthetic]
slots = 60

[agent]
pretrain_slots = 20
pretrain_actor_steps = 50
actor_hidden = [16, 8]
critic_state_units = 8
critic_action_units = 8
critic_hidden = 8
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coded-cache"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn last_json(bytes: &[u8]) -> Value {
    let text = String::from_utf8_lossy(bytes);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("a JSON line");
    serde_json::from_str(line).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

#[test]
fn topo_and_trace_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["topo"]);
    assert!(out.status.success());
    assert_eq!(last_json(&out.stdout)["status"], "ok");
    assert!(dir.path().join("topology.json").exists());

    let out = run(dir.path(), &["--seed", "3", "trace"]);
    assert!(out.status.success());
    let v = last_json(&out.stdout);
    assert_eq!(v["seed"], 3);
    assert_eq!(v["files"], 10);
    assert!(dir.path().join("trace_per_user.csv").exists());
}

#[test]
fn train_then_evaluate_round_trips_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = run(
        dir.path(),
        &["--config", &config, "train", "--policy", "sddpg"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(last_json(&out.stdout)["avg_cost"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("actor.bin").exists());

    let ckpt = dir.path().display().to_string();
    let out = run(
        dir.path(),
        &[
            "--config",
            &config,
            "evaluate",
            "--checkpoint",
            &ckpt,
            "--policy",
            "sddpg",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("eval_costs_sddpg.csv").exists());
}

#[test]
fn identical_runs_write_identical_costs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let config = tiny_config(dir.path());
        let out = run(
            dir.path(),
            &["--config", &config, "train", "--policy", "ddpg"],
        );
        assert!(out.status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("costs_ddpg.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn errors_are_one_json_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["--config", "/definitely/missing.toml", "topo"],
    );
    assert_eq!(out.status.code(), Some(1));
    let v = last_json(&out.stderr);
    assert_eq!(v["status"], "error");
    assert_eq!(v["kind"], "io");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[agent]\nno_such_key = 1\n").unwrap();
    let out = run(dir.path(), &["--config", bad.to_str().unwrap(), "topo"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_json(&out.stderr)["kind"], "parameter");

    let out = run(
        dir.path(),
        &["evaluate", "--checkpoint", "/nowhere", "--policy", "sddpg"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_json(&out.stderr)["kind"], "checkpoint");

    let out = run(dir.path(), &["predict", "--method", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(last_json(&out.stderr)["kind"], "usage");
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("sweep"));
}
