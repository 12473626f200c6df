use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BLOBS: &str = r#"
[defaults]
model = "mlp:4-8-2"
dataset = { kind = "blobs", n = 24, dim = 4, separation = 2.0 }
steps = 6
batch = 3
repetitions = 2
metric = { m = 8 }
"#;

fn impsamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_impsamp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn config(dir: &Path) -> String {
    let p = dir.join("blobs.toml");
    fs::write(&p, BLOBS).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_flags_and_commands_fail_with_usage() {
    for args in [&["--bogus"][..], &["frobnicate"], &["speed-check", "--trials", "x"], &[]] {
        let o = impsamp(args);
        assert!(!o.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("--help"), "{args:?}");
    }
}

#[test]
fn help_lists_every_subcommand() {
    let o = impsamp(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in [
        "train",
        "reproduce-fig2",
        "timing",
        "eval-scheme",
        "speed-check",
        "grad-check",
        "fetch-data",
        "verify-theorem",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn verification_commands_pass() {
    let o = impsamp(&["speed-check", "--trials", "10"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 4);

    let o = impsamp(&["--seed", "5", "verify-theorem", "--trials", "100"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("PASS 0 of 100"));
}

#[test]
fn train_writes_a_reloadable_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("out");
    let o = impsamp(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "4",
        "train",
        "--optimizer",
        "momentum",
        "--scheme",
        "mix:0.5",
        "--run-index",
        "1",
        "--metric",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("runs/momentum-mix0.5/1.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["run_index"], 1);
    assert_eq!(v["losses"].as_array().unwrap().len(), 7);
    assert_eq!(v["quality"].as_array().unwrap().len(), 12);
}

#[test]
fn grid_filters_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("grid");
    let o = impsamp(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "reproduce-fig2",
        "--optimizer",
        "sgd",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    for cell in ["sgd-uniform", "sgd-gradnorm", "sgd-mix0.5"] {
        assert!(table.contains(cell), "{cell}");
        assert!(out.join("runs").join(cell).join("1.json").is_file());
    }
    assert!(!table.contains("adam"));
    for f in ["curves.csv", "summary.json", "timing.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let o = impsamp(&["--config", &cfg, "reproduce-fig2", "--optimizer", "adam", "--scheme", "mix:0.5"]);
    assert!(!o.status.success());
}

#[test]
fn eval_scheme_writes_metric_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("eval");
    let o = impsamp(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "eval-scheme",
        "--candidate",
        "gradnorm",
        "--m",
        "6",
        "--cadence",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metric.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,divergence,d_p,d_u,m,flagged"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split(',').nth(4) == Some("6")));
    assert!(out.join("quality.json").is_file());
}

#[test]
fn missing_data_points_at_fetch_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = impsamp(&[
        "--out",
        dir.path().to_str().unwrap(),
        "train",
        "--steps",
        "1",
        "--data-dir",
        dir.path().join("nowhere").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("fetch-data"));
}
