use std::path::Path;
use std::process::Command;

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name).to_string_lossy().into_owned()
}

fn run(args: &[&str], root: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pushdiging")).args(args).env("PUSHDIGING_OUTPUT_ROOT", root).output().unwrap()
}

#[test]
fn run_writes_under_the_output_root() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["run", &config("fig1.cfg")], root.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.path().join("out/fig1/comparison.csv").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains("push-diging.status = \"completed\""));
}

#[test]
fn divergent_run_exits_nonzero() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["run", &config("divergent.cfg")], root.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at iteration"));
}

#[test]
fn check_graph_and_sweep_succeed() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["check-graph", &config("fig1.cfg")], root.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("status = PASS"));
    let out = run(&["sweep", &config("fig1.cfg"), "--scales", "0.5,1"], root.path());
    assert!(out.status.success());
    assert!(root.path().join("out/fig1/sweep/sweep.txt").is_file());
}

#[test]
fn invalid_certificate_and_failed_audit_exit_nonzero() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["certify", &config("fig1.cfg")], root.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("lambda = \"invalid\""));
    let out = run(&["audit", &config("fig1.cfg")], root.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(root.path().join("out/fig1/audit.txt").is_file());
}

#[test]
fn missing_config_is_an_error() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["run", "/nonexistent/config.cfg"], root.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/config.cfg"));
}
