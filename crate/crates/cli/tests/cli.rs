use std::fs;
use std::process::{Command, Output};

fn rbfood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbfood"))
        .args(args)
        .output()
        .expect("spawn rbfood")
}

#[test]
fn help_succeeds_and_lists_subcommands() {
    let out = rbfood(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "gen-data",
        "toy2d",
        "train-propseg",
        "train-propcls",
        "eval-proposals",
        "eval-image",
        "metrics",
        "flag-detections",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(rbfood(&[]).status.code(), Some(2));
    assert_eq!(rbfood(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(rbfood(&["metrics"]).status.code(), Some(2));
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    fs::write(&config, "no.such.key = 1\n").unwrap();
    let out = dir.path().join("out");
    let out = rbfood(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_input_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csv");
    let out = rbfood(&["metrics", "--scores", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn metrics_on_separated_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(&scores, "score,label\n0.9,1\n0.8,1\n0.3,0\n0.1,0\n").unwrap();
    let report = dir.path().join("report.csv");
    let out = rbfood(&[
        "metrics",
        "--scores",
        scores.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout, "auroc,1.000000\nap,1.000000\nfpr95,0.000000\n");
    assert_eq!(fs::read_to_string(report).unwrap(), stdout);
}
