//! Drives the `graspcap` binary end to end: dataset generation, the
//! staged subcommands, the full run and evaluation.

use std::path::Path;
use std::process::{Command, Output};

fn graspcap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graspcap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn expect_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_run_is_deterministic_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let out = graspcap(
        dir.path(),
        &["synth", "--out-dir", "scene", "--seed", "5", "--frames", "20", "--noise", "0.5"],
    );
    expect_success(&out, "synth");

    let run = |result: &str| {
        let out = graspcap(
            dir.path(),
            &["run", "--config", "scene/config.txt", "--out", result],
        );
        expect_success(&out, "run");
        std::fs::read(dir.path().join(result)).unwrap()
    };
    let first = run("a.txt");
    let second = run("b.txt");
    assert_eq!(first, second, "identical runs must write byte-identical documents");

    let out = graspcap(
        dir.path(),
        &["evaluate", "--result", "a.txt", "--scene-dir", "scene", "--out", "metrics.txt"],
    );
    expect_success(&out, "evaluate");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("joint_rmse"), "metrics printed:\n{stdout}");
    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    let rmse: f64 = metrics
        .lines()
        .find_map(|l| l.strip_prefix("joint_rmse = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(rmse < 0.01, "joint rmse {rmse} from the cli run");
}

#[test]
fn staged_subcommands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let out = graspcap(dir.path(), &["synth", "--out-dir", "scene", "--seed", "8"]);
    expect_success(&out, "synth");

    let cfg = ["--config", "scene/config.txt"];
    let out = graspcap(dir.path(), &[&cfg[..], &["object-pose", "--out", "pose.txt"][..]].concat());
    expect_success(&out, "object-pose");
    let out = graspcap(dir.path(), &[&cfg[..], &["sfm", "--out", "sfm.txt"][..]].concat());
    expect_success(&out, "sfm");
    let out = graspcap(
        dir.path(),
        &[&cfg[..], &["fit-hand", "--sfm", "sfm.txt", "--out", "hand.txt"][..]].concat(),
    );
    expect_success(&out, "fit-hand");
    let out = graspcap(
        dir.path(),
        &[&cfg[..], &["adjust", "--object-pose", "pose.txt", "--out", "adj.txt"][..]].concat(),
    );
    expect_success(&out, "adjust");
    let out = graspcap(
        dir.path(),
        &[
            &cfg[..],
            &[
                "refine",
                "--hand",
                "hand.txt",
                "--object-pose",
                "pose.txt",
                "--adjustment",
                "adj.txt",
                "--out",
                "refined.txt",
                "--dump-skeleton",
                "hand.obj",
            ][..],
        ]
        .concat(),
    );
    expect_success(&out, "refine");
    let out = graspcap(
        dir.path(),
        &[
            &cfg[..],
            &[
                "propagate",
                "--sfm",
                "sfm.txt",
                "--object-pose",
                "pose.txt",
                "--adjustment",
                "adj.txt",
                "--hand",
                "refined.txt",
                "--out",
                "prop.txt",
            ][..],
        ]
        .concat(),
    );
    expect_success(&out, "propagate");

    for file in ["pose.txt", "sfm.txt", "hand.txt", "adj.txt", "refined.txt", "prop.txt", "hand.obj"]
    {
        assert!(dir.path().join(file).exists(), "{file} missing");
    }

    // The first propagated object pose equals adjustment ∘ object pose
    // (frame 1 is the identity anchor).
    let prop = std::fs::read_to_string(dir.path().join("prop.txt")).unwrap();
    let first_pose = prop
        .lines()
        .find_map(|l| l.strip_prefix("pose = "))
        .expect("propagated pose present");
    let adj = std::fs::read_to_string(dir.path().join("adj.txt")).unwrap();
    assert!(adj.contains("matrix = "));
    assert!(!first_pose.is_empty());
}

#[test]
fn run_without_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = graspcap(dir.path(), &["run"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--config"), "stderr: {stderr}");
}

#[test]
fn missing_input_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = graspcap(dir.path(), &["synth", "--out-dir", "scene", "--seed", "3"]);
    expect_success(&out, "synth");
    std::fs::remove_file(dir.path().join("scene/turntable.xyz")).unwrap();
    let out = graspcap(dir.path(), &["run", "--config", "scene/config.txt"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("turntable.xyz"), "stderr: {stderr}");
}
