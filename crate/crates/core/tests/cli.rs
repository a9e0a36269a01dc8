//! End-to-end runs of the `sar` command line.

use std::path::Path;
use std::process::Command;

use sar_core::cli::run_cli;
use sar_core::io::read_columns;

fn run(dir: &Path, args: &[&str]) -> i32 {
    let out = dir.to_str().unwrap();
    let argv = ["sar"].iter().chain(args).copied().chain(["--out", out]);
    run_cli(argv)
}

#[test]
fn solve_writes_solution_moments_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(dir.path(), &["solve", "--problem", "toy", "--n", "40", "--delta", "0.01", "--rule", "chi1", "--tau", "1.1", "--paths", "100", "--seed", "7"]);
    assert_eq!(code, 0);
    let sol = read_columns(dir.path().join("solution.tsv")).unwrap();
    for name in ["grid", "mean", "variance", "analytic_mean", "x_true"] {
        assert_eq!(sol.column(name).map(<[f64]>::len), Some(40), "column {name}");
    }
    assert!(sol.column("variance").unwrap().iter().all(|v| *v >= 0.0));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "solve");
}

#[test]
fn order_study_uses_the_requested_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(dir.path(), &["order", "--n", "30", "--paths", "50", "--dts", "4"]);
    assert_eq!(code, 0);
    let table = read_columns(dir.path().join("order.tsv")).unwrap();
    assert_eq!(table.column("dt").map(<[f64]>::len), Some(4));
}

#[test]
fn problem_info_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["problem-info", "--n", "20"]), 0);
}

#[test]
fn usage_and_configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["solve", "--no-such-flag"]), 2);
    assert_eq!(run(dir.path(), &["solve", "--rule", "never"]), 2);
    assert_eq!(run(dir.path(), &["solve", "--delta=-1"]), 2);
    assert_eq!(run(dir.path(), &["solve", "--holder", "0.5", "--log-source", "1"]), 2);
    assert_eq!(run(dir.path(), &["ensemble", "--n", "20"]), 2);
}

#[test]
fn unreachable_discrepancy_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["solve", "--n", "20", "--paths", "10", "--t-max", "1"]), 4);
}

#[test]
fn binary_reports_errors_as_json_on_stderr() {
    let out = Command::new(env!("CARGO_BIN_EXE_sar"))
        .args(["solve", "--n", "20", "--paths", "10", "--t-max", "1", "--out"])
        .arg(tempfile::tempdir().unwrap().path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["exit_code"], 4);
    assert!(out.stdout.is_empty());
}
