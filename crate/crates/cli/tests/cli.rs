//! End-to-end checks of the binary: exit codes, file outputs, determinism.

use std::path::Path;
use std::process::{Command, Output};

fn splatcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatcal"))
        .args(args)
        .env_remove("SPLATCAL_THREADS")
        .output()
        .expect("binary runs")
}

fn gen_plane(dir: &Path, views: usize) {
    let out = splatcal(&[
        "gen-scene",
        "--preset",
        "textured-plane",
        "--views",
        &views.to_string(),
        "--width",
        "16",
        "--height",
        "16",
        "--orbit-deg",
        "30",
        "--seed",
        "4",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = splatcal(&[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "stderr: {err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_subcommand_exits_1() {
    let out = splatcal(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_scene_writes_dataset_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    gen_plane(&seq, 4);
    for name in ["manifest.json", "gt_cameras.json", "frame_00003.png", "depth_00000.bin"] {
        assert!(seq.join(name).exists(), "missing {name}");
    }
    let out = splatcal(&[
        "gen-scene", "--views", "4", "--width", "16", "--height", "16", "--out",
        seq.to_str().unwrap(),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["frames"], 4);
    assert_eq!(summary["preset"], "box");
}

#[test]
fn gradcheck_reports_json_and_exit_zero() {
    let out = splatcal(&["gradcheck", "--scenes", "2", "--gaussians", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["precision"], "f32");
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-3);

    let out = splatcal(&["gradcheck", "--scenes", "1", "--gaussians", "4", "--tol", "1e-15"]);
    assert_eq!(out.status.code(), Some(2), "unattainable tolerance must fail");
}

#[test]
fn label_overlap_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    gen_plane(&seq, 5);
    let args = [
        "label-overlap",
        "--seq",
        seq.to_str().unwrap(),
        "--provider",
        "geometric",
        "--triplets",
        "4",
        "--seed",
        "11",
    ];
    let a = splatcal(&args);
    let b = splatcal(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let profile: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(profile["provider"], "geometric");
}

#[test]
fn fit_writes_checkpoint_history_and_cameras() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    gen_plane(&seq, 4);
    let run = dir.path().join("run");
    let out = splatcal(&[
        "fit",
        "--seq",
        seq.to_str().unwrap(),
        "--views",
        "4",
        "--k-ref",
        "2",
        "--steps-per-window",
        "3",
        "--init-depth",
        "2.5",
        "--seed",
        "7",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["checkpoint.splc", "fitted_cameras.json", "loss_history.csv", "fit_report.json"] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    let csv = std::fs::read_to_string(run.join("loss_history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus one row per step");
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["steps"], 3);
    assert_eq!(report["config"]["seed"], 7);

    // The checkpoint renders from its fitted cameras.
    let renders = dir.path().join("renders");
    let out = splatcal(&[
        "render",
        "--checkpoint",
        run.join("checkpoint.splc").to_str().unwrap(),
        "--cameras",
        run.join("fitted_cameras.json").to_str().unwrap(),
        "--out",
        renders.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(renders.read_dir().unwrap().count() >= 4);
}

#[test]
fn eval_pose_scores_ground_truth_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    gen_plane(&seq, 4);
    // gt_cameras.json has no frame list, so frames default to 0..n.
    let out = splatcal(&[
        "eval-pose",
        "--pred",
        seq.join("gt_cameras.json").to_str().unwrap(),
        "--seq",
        seq.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for acc in report["accuracy"].as_array().unwrap() {
        assert_eq!(acc.as_f64().unwrap(), 1.0);
    }
}
