//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[problem]
kind = "cir"
d = 2

[schedule]
base_counts = [60, 3, 2]
ipart_max = 1

[law]
lambdas = [0.5, 1.0]

[run]
seed = 4
"#;

fn nestmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nestmc")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn csv_identical_across_shard_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let run = |shards: &str| {
        let out = nestmc(&["run", "--config", &cfg, "--shards", shards, "--no-timing"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let one = run("1");
    assert_eq!(one, run("8"));
    let text = String::from_utf8(one).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("problem,d,p,alpha,lambda,ipart,N0,N1,N2,estimate,"));
}

#[test]
fn out_flag_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let csv = dir.path().join("small.csv");
    let out = nestmc(&[
        "run",
        "--config",
        &cfg,
        "--out",
        csv.to_str().unwrap(),
        "--ipart-max",
        "0",
        "--seed",
        "9",
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().ends_with(",9,ok"));
    let meta = std::fs::read_to_string(dir.path().join("small.csv.meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&meta).unwrap();
    assert_eq!(meta["config"]["run"]["seed"], 9);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nestmc(&["run", "--config", "/nonexistent.toml"]).status.code(), Some(1));
    let bad = write(dir.path(), "bad.toml", &SMALL.replace("d = 2", "d = 2\nx0 = [0.1]"));
    assert_eq!(nestmc(&["run", "--config", &bad]).status.code(), Some(1));
    let typo = write(dir.path(), "typo.toml", &SMALL.replace("lambdas", "lambda"));
    assert_eq!(nestmc(&["run", "--config", &typo]).status.code(), Some(1));
    assert_eq!(nestmc(&["acceptance", "nonsense"]).status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_two_with_error_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "blowup.toml",
        &format!("{SMALL}\n[problem.cir]\na = 1e308\n"),
    );
    let out = nestmc(&["run", "--config", &cfg, "--shards", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().last().unwrap().contains(",error: non-finite"), "{text}");
}

#[test]
fn lists_problems() {
    let out = nestmc(&["list-problems"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for kind in ["cir", "toy", "hjb", "diagnostic"] {
        assert!(text.lines().any(|l| l.starts_with(kind)), "{kind}");
    }
}
