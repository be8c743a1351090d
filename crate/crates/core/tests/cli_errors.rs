use std::fs;
use std::process::{Command, Output};

fn viewforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viewforge"))
        .args(args)
        .env("VIEWFORGE_THREADS", "1")
        .output()
        .expect("spawn viewforge")
}

fn assert_one_line_error(out: &Output) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let diag: Vec<&str> = err.lines().filter(|l| l.starts_with("error: ")).collect();
    assert_eq!(diag.len(), 1, "stderr: {err}");
}

#[test]
fn missing_input_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = viewforge(&[
        "extract-mesh",
        "--grid",
        dir.path().join("absent.vfck").to_str().unwrap(),
        "--out",
        dir.path().join("m.obj").to_str().unwrap(),
    ]);
    assert_one_line_error(&out);
}

#[test]
fn unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"objects": 2, "colour": 1}"#).unwrap();
    let out = viewforge(&[
        "dataset",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("ds").to_str().unwrap(),
    ]);
    assert_one_line_error(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn bad_checkpoint_magic() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("g.vfck");
    fs::write(&grid, b"NOTACHECKPOINT\0\0\0\0\0\0").unwrap();
    let out = viewforge(&[
        "extract-mesh",
        "--grid",
        grid.to_str().unwrap(),
        "--out",
        dir.path().join("m.obj").to_str().unwrap(),
    ]);
    assert_one_line_error(&out);
}

#[test]
fn invalid_pose_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = viewforge(&[
        "oracle-recon",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--theta",
        "4.0",
        "--iterations",
        "1",
    ]);
    assert_one_line_error(&out);
}

#[test]
fn evaluate_needs_inputs() {
    let out = viewforge(&["evaluate"]);
    assert_one_line_error(&out);
}
