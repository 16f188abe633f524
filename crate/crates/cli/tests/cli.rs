use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_modelmarket"));
    for (k, _) in std::env::vars() {
        if k.starts_with("MODELMARKET_") {
            c.env_remove(k);
        }
    }
    c
}

fn config(clients: usize, methods: &str) -> String {
    format!(
        r#"
name = "cli"
seed = 5
methods = [{methods}]

[scenario]
scenario = "S1"
num_clients = {clients}

[scenario.data]
source = "synthetic"
n_samples = {samples}
n_features = 4
n_classes = 3

[training]
rounds = 3
learning_rate = 0.2
batch_size = 8
local_epochs = 1

[market]
difficulty = 4
"#,
        samples = 60 * clients
    )
}

fn write(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_in(dir: &Path, cfg: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("run")
        .arg(cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn records(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("out/report.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn full_run_writes_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), &config(5, r#""sfsv", "single-cal", "multi-cal", "afs""#));
    let out = run_in(dir.path(), &cfg, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.jsonl", "summary.json", "timings.jsonl", "chain.jsonl", "round_log.jsonl", "settlement.json"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    assert!(dir.path().join("out/blobs").is_dir());

    let recs = records(dir.path());
    let methods: Vec<_> = recs.iter().filter(|r| r["record"] == "method").collect();
    assert_eq!(methods.len(), 4);
    for m in methods {
        let s: f64 = m["phi_normalized"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let paid: u64 = recs
        .iter()
        .filter(|r| r["record"] == "payout" || r["record"] == "refund")
        .map(|r| r["amount"].as_u64().unwrap())
        .sum();
    assert_eq!(paid, 1_000_000);

    let rank = bin().arg("rank").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(rank.status.code(), Some(0));
    let table = String::from_utf8(rank.stdout).unwrap();
    let sfsv = table.lines().find(|l| l.starts_with("sfsv")).unwrap();
    assert!(sfsv.ends_with("0.0000"), "{table}");
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn afs_only_runs_past_exact_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), &config(12, r#""afs""#));
    let out = run_in(dir.path(), &cfg, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn capacity_violation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), &config(12, r#""sfsv", "afs""#));
    let out = run_in(dir.path(), &cfg, &[]);
    assert_eq!(out.status.code(), Some(3));
    // narrowing the methods on the command line lifts the limit
    let out = run_in(dir.path(), &cfg, &["--methods", "afs"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "name = \"x\"\n[scenario\n");
    assert_eq!(run_in(dir.path(), &cfg, &[]).status.code(), Some(2));

    let cfg = write(dir.path(), &config(5, r#""afs""#).replace("rounds = 3", "rounds = 0"));
    assert_eq!(run_in(dir.path(), &cfg, &[]).status.code(), Some(2));

    let missing = dir.path().join("nope.toml");
    assert_eq!(run_in(dir.path(), &missing, &[]).status.code(), Some(2));

    let cfg = write(dir.path(), &config(5, r#""afs""#));
    assert_eq!(run_in(dir.path(), &cfg, &["--methods", "banzhaf"]).status.code(), Some(2));
    assert_eq!(run_in(dir.path(), &cfg, &["--difficulty", "40"]).status.code(), Some(2));
}

#[test]
fn environment_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), &config(3, r#""afs""#));
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .env("MODELMARKET_OUT_DIR", dir.path().join("out"))
        .env("MODELMARKET_SEED", "99")
        .env("MODELMARKET_DIFFICULTY", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = &records(dir.path())[0];
    assert_eq!(summary["seeds"]["master"], 99);

    // a flag beats the environment
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--seed")
        .arg("7")
        .env("MODELMARKET_OUT_DIR", dir.path().join("out"))
        .env("MODELMARKET_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(records(dir.path())[0]["seeds"]["master"], 7);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), &config(4, r#""single-cal", "afs""#));
    let read = |name: &str| std::fs::read(dir.path().join("out").join(name)).unwrap();
    assert_eq!(run_in(dir.path(), &cfg, &[]).status.code(), Some(0));
    let first = (read("report.jsonl"), read("chain.jsonl"));
    assert_eq!(run_in(dir.path(), &cfg, &[]).status.code(), Some(0));
    assert_eq!(first, (read("report.jsonl"), read("chain.jsonl")));
}

#[test]
fn bound_subcommand() {
    let out = bin().args(["bound"]).output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "185");
    let out = bin().args(["bound", "--range", "2"]).output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "738");
    let out = bin().args(["bound", "--epsilon", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
