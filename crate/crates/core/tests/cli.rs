use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pnd_core::decoder::DecodeConfig;
use pnd_core::harness::{Benchmark, HarnessConfig};
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = "\
n_scenes = 60
n_probes = 80
n_captions = 12
alpha = 1.0
gamma = 0.5
lambda = 3.0
";

fn pnd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnd")).args(args).output().unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("small.conf");
    fs::write(&conf, SMALL).unwrap();
    (dir, conf)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// File contents with the wall-clock line removed.
fn without_timestamp(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim_start().starts_with("\"generated_at\""))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn run_ok(args: &[&str]) {
    let out = pnd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn every_subcommand_is_reproducible() {
    let (dir, conf) = setup();
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("probe-gen", vec![]),
        ("eval", vec![]),
        ("ablate", vec![]),
        ("trace", vec!["--scene", "3"]),
        ("trace", vec!["--scene", "3", "--object", "5"]),
        ("sweep", vec!["--grid", "gamma=0,0.5"]),
    ];
    for (i, (cmd, extra)) in cases.iter().enumerate() {
        let outputs: Vec<String> = (0..2)
            .map(|run| {
                let out = dir.path().join(format!("{i}-{run}.out"));
                let mut args = vec![*cmd, "--config", s(&conf), "--out", s(&out)];
                args.extend(extra.iter().copied());
                run_ok(&args);
                without_timestamp(&out)
            })
            .collect();
        assert!(!outputs[0].is_empty(), "{cmd} wrote nothing");
        assert_eq!(outputs[0], outputs[1], "{cmd} {extra:?} differs between runs");
    }
}

#[test]
fn eval_matches_golden_report() {
    let (dir, conf) = setup();
    let out = dir.path().join("eval.json");
    run_ok(&["eval", "--config", s(&conf), "--out", s(&out)]);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden/eval_small.json");
    assert_eq!(without_timestamp(&out), without_timestamp(&golden));
}

#[test]
fn eval_csv_has_one_row_per_strategy() {
    let (dir, conf) = setup();
    let (json, csv) = (dir.path().join("e.json"), dir.path().join("e.csv"));
    run_ok(&["eval", "--config", s(&conf), "--out", s(&json), "--csv", s(&csv)]);
    let text = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("strategy,alpha,gamma"));
}

#[test]
fn zero_weights_from_the_command_line_equal_the_library_baseline() {
    let (dir, conf) = setup();
    let out = dir.path().join("base.json");
    run_ok(&["eval", "--config", s(&conf), "--alpha", "0", "--gamma", "0", "--out", s(&out)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();

    let cfg = HarnessConfig::from_key_values(SMALL).unwrap();
    let bench = Benchmark::from_config(&cfg).unwrap();
    let sets = bench.probe_sets(&cfg).unwrap();
    let baseline = DecodeConfig {
        alpha: 0.0,
        gamma: 0.0,
        ..cfg.decode.clone()
    };
    let strategies = report["strategies"].as_array().unwrap();
    assert_eq!(strategies.len(), sets.len());
    for (row, set) in strategies.iter().zip(&sets) {
        let m = bench.score(&set.probes, &baseline).unwrap();
        assert_eq!(row["metrics"], serde_json::to_value(m).unwrap());
    }
}

#[test]
fn stored_probes_reproduce_generated_ones() {
    let (dir, conf) = setup();
    let probes = dir.path().join("probes.json");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    run_ok(&["probe-gen", "--config", s(&conf), "--out", s(&probes)]);
    run_ok(&["eval", "--config", s(&conf), "--out", s(&a)]);
    run_ok(&["eval", "--config", s(&conf), "--probes", s(&probes), "--out", s(&b)]);
    assert_eq!(without_timestamp(&a), without_timestamp(&b));
}

#[test]
fn sweep_rows_cover_the_grid() {
    let (dir, conf) = setup();
    let out = dir.path().join("sweep.csv");
    run_ok(&[
        "sweep", "--config", s(&conf), "--out", s(&out),
        "--grid", "alpha=0,1", "--grid", "gamma=0,0.5,1", "--grid", "noise-step=100,500",
    ]);
    let rows = fs::read_to_string(out).unwrap().lines().count() - 1;
    assert_eq!(rows, 3 * 2 * 3 * 2);
}

#[test]
fn trace_has_a_header_and_one_line_per_token() {
    let (dir, conf) = setup();
    let out = dir.path().join("trace.jsonl");
    run_ok(&["trace", "--config", s(&conf), "--scene", "1", "--out", s(&out)]);
    let text = fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    let header: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    let tokens = header["tokens"].as_array().unwrap().len();
    assert_eq!(lines.count(), tokens);
}

#[test]
fn exit_codes_separate_usage_from_runtime_failures() {
    let (dir, conf) = setup();
    assert_eq!(pnd(&["eval", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(pnd(&["eval", "--config", s(&conf), "--beta", "0"]).status.code(), Some(2));
    assert_eq!(pnd(&["eval", "--config", s(&conf), "--set", "bogus=1"]).status.code(), Some(2));
    assert_eq!(pnd(&["trace", "--config", s(&conf), "--scene", "999"]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(pnd(&["eval", "--config", s(&conf), "--probes", s(&missing)]).status.code(), Some(1));
    assert_eq!(pnd(&["--help"]).status.code(), Some(0));
}
