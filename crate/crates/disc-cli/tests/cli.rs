//! Behavioural tests of the `disc` binary: artifact formats, report
//! plumbing, and the exit-code contract (0 ok, 2 config, 1 otherwise).

use std::fs::File;
use std::path::Path;
use std::process::{Command, Output};

use disc_core::labels::LabelGrid;
use disc_core::tensor::Tensor;

fn disc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disc")).args(args).output().expect("binary runs")
}

fn stdout_of(output: &Output) -> String {
    assert!(
        output.status.success(),
        "command failed ({:?}): {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout.clone()).expect("utf-8 stdout")
}

/// Small model so forward passes stay around a tenth of a second.
fn write_quick_config(path: &Path) {
    let text = "\
[camera]
width = 32
height = 32
focal = 24

[model]
channels = 8
classes = 4

[queries]
instance_count = 8

[decoder]
layers = 1
height_candidates = 4
heights_selected = 2

[run]
seed = 9
";
    std::fs::write(path, text).expect("config written");
}

#[test]
fn gen_is_deterministic_and_readable() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut artifacts = Vec::new();
    for dir in &dirs {
        let out = dir.path().join("world.sscv1");
        let output = disc(&["gen", "--seed", "3", "--out", out.to_str().unwrap()]);
        let text = stdout_of(&output);
        assert!(text.contains("scene=3"), "stdout was: {text}");
        assert!(text.contains("dims=64x64x16"), "stdout was: {text}");
        artifacts.push((std::fs::read(&out).unwrap(), text));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "same seed must give the same world");
    assert_eq!(artifacts[0].1, artifacts[1].1, "reports must not depend on paths");

    let grid = LabelGrid::read_binary(&mut artifacts[0].0.as_slice()).expect("valid volume file");
    assert_eq!(grid.dims(), [64, 64, 16]);
    assert_eq!(grid.num_classes(), 8);
    assert!(grid.labels().iter().any(|&l| l != 0), "a generated world is never empty");
}

#[test]
fn run_writes_prediction_and_readable_intermediates() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.cfg");
    write_quick_config(&config);
    let pred_path = dir.path().join("pred.sscv1");
    let dump = dir.path().join("stages");
    let output = disc(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--scene",
        "1",
        "--out",
        pred_path.to_str().unwrap(),
        "--dump-intermediates",
        dump.to_str().unwrap(),
    ]);
    let text = stdout_of(&output);
    assert!(text.contains("seed=9"), "stdout was: {text}");
    assert!(text.contains("mode=inference"), "stdout was: {text}");

    let pred = LabelGrid::read_binary(&mut File::open(&pred_path).unwrap()).expect("prediction");
    assert_eq!(pred.dims(), [64, 64, 16]);
    assert_eq!(pred.num_classes(), 4);

    let mut stages = 0usize;
    for entry in std::fs::read_dir(&dump).unwrap() {
        let path = entry.unwrap().path();
        assert_eq!(path.extension().and_then(|e| e.to_str()), Some("tens1"), "{path:?}");
        let tensor = Tensor::read_binary(&mut File::open(&path).unwrap()).expect("stage tensor");
        assert!(tensor.data().iter().all(|v| v.is_finite()), "{path:?} holds non-finite values");
        stages += 1;
    }
    assert!(stages >= 10, "only {stages} stage dumps written");
    let logits = Tensor::read_binary(&mut File::open(dump.join("logits.tens1")).unwrap()).unwrap();
    assert_eq!(logits.shape(), &[4, 64, 64, 16]);
}

#[test]
fn train_mode_prints_loss_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.cfg");
    write_quick_config(&config);
    let pred = dir.path().join("pred.sscv1");
    let output = disc(&[
        "--mode",
        "train-step",
        "run",
        "--config",
        config.to_str().unwrap(),
        "--scene",
        "1",
        "--out",
        pred.to_str().unwrap(),
    ]);
    let text = stdout_of(&output);
    assert!(text.contains("mode=train-step"), "stdout was: {text}");
    assert!(text.contains("total="), "stdout was: {text}");
    assert!(text.contains("seg.layer0="), "stdout was: {text}");
}

#[test]
fn eval_report_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.cfg");
    write_quick_config(&config);
    let report = dir.path().join("report.txt");
    let output = disc(&[
        "--mode",
        "train-step",
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--scenes",
        "2",
        "--report",
        report.to_str().unwrap(),
    ]);
    let text = stdout_of(&output);
    assert!(text.contains("scenes=2"), "stdout was: {text}");
    assert!(text.contains("loss.mean_total="), "stdout was: {text}");
    let written = std::fs::read_to_string(&report).unwrap();
    assert_eq!(written, text, "the report file must mirror stdout");
}

#[test]
fn seed_override_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.cfg");
    write_quick_config(&config);
    let pred = dir.path().join("pred.sscv1");
    let output = disc(&[
        "--seed",
        "41",
        "run",
        "--config",
        config.to_str().unwrap(),
        "--scene",
        "1",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert!(stdout_of(&output).contains("seed=41"));
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "[model]\nchannels = 10\n").unwrap();
    let pred = dir.path().join("pred.sscv1");
    let output = disc(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--scene",
        "0",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error:"), "stderr was: {stderr}");
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "[model]\nwidgets = 3\n").unwrap();
    let pred = dir.path().join("pred.sscv1");
    let output = disc(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--scene",
        "0",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("widgets"), "stderr was: {stderr}");
}

#[test]
fn missing_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.sscv1");
    let output = disc(&[
        "run",
        "--config",
        dir.path().join("nope.cfg").to_str().unwrap(),
        "--scene",
        "0",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(!output.stderr.is_empty());
}

#[test]
fn usage_error_exits_two() {
    let output = disc(&["run"]);
    assert_eq!(output.status.code(), Some(2), "clap usage errors share the config exit code");
}

#[test]
fn selftest_reports_every_check() {
    let output = disc(&["selftest"]);
    let text = stdout_of(&output);
    assert!(text.contains("passed 10/10 checks"), "stdout was: {text}");
    assert!(!text.contains("[FAIL]"), "stdout was: {text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("[ok]")).count(), 10);
}
