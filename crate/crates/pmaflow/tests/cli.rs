//! End-to-end checks of the `pmaflow` binary: exit codes, output files, determinism and replay.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pmaflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmaflow")).args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--out", dir.to_str().unwrap()];
    full.extend_from_slice(args);
    pmaflow(&full)
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

const SHORT_FLOW: [&str; 6] = ["--T", "2", "flow", "--distill-epochs", "40", "--mmd-samples=0"];

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(pmaflow(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_verify_suite_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run_in(dir.path(), &["verify", "--filter", "nope"]).status.code(), Some(2));
}

#[test]
fn invalid_flag_value_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run_in(dir.path(), &["gaussian", "--lambda", "-1"]).status.code(), Some(2));
}

#[test]
fn verify_passes_and_the_label_mutation_is_caught() {
    let dir = TempDir::new().unwrap();
    let ok = run_in(dir.path(), &["verify", "--filter", "vi"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = run_in(dir.path(), &["verify", "--filter", "learners", "--flip-alg1-labels"]);
    assert_eq!(bad.status.code(), Some(1), "{}", String::from_utf8_lossy(&bad.stdout));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn gaussian_writes_both_tables_and_the_config_echo() {
    let dir = TempDir::new().unwrap();
    assert!(run_in(dir.path(), &["gaussian"]).status.success());
    assert_eq!(header(&dir.path().join("gaussian_continuous.csv")), "t,sigma_riccati,sigma_fp,ratio");
    assert_eq!(header(&dir.path().join("gaussian_discrete.csv")), "k,c,bound");
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert!(cfg["cli"].is_object());
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn vi_trace_has_one_row_per_iterate() {
    let dir = TempDir::new().unwrap();
    assert!(run_in(dir.path(), &["--T", "7", "vi", "--exact"]).status.success());
    let text = fs::read_to_string(dir.path().join("vi_trace.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,m,s,eta,err1,err2");
    assert_eq!(lines.len(), 1 + 8);
}

#[test]
fn flow_outputs_are_byte_identical_for_a_fixed_seed() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        let o = run_in(d.path(), &[&["--seed", "5"][..], &SHORT_FLOW[..]].concat());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["flow_trace.csv", "final_map.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    assert_eq!(header(&a.path().join("flow_trace.csv")), "k,eta,kl,bg,min_hess,sup_map_err,mmd,avg_identity_residual");
    assert_eq!(header(&a.path().join("final_map.csv")), "y,psi_prime,psi_star_prime");
}

#[test]
fn replay_reproduces_the_recorded_run() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert!(run_in(a.path(), &["--seed", "3", "--T", "12", "vi", "--draws", "200"]).status.success());
    let cfg = a.path().join("config.json");
    let o = run_in(b.path(), &["replay", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.path().join("vi_trace.csv")).unwrap(), fs::read(b.path().join("vi_trace.csv")).unwrap());
}

#[test]
fn replay_of_a_missing_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(run_in(dir.path(), &["replay", missing.to_str().unwrap()]).status.code(), Some(2));
}
