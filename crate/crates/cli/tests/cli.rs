//! End-to-end runs of the `proteus` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proteus_cli::metrics::read_metrics;
use proteus_core::data::load_container;

fn proteus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proteus"))
        .args(args)
        .env("PROTEUS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = proteus(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path, name: &str, per_class: &str, seed: &str) -> PathBuf {
    let p = dir.join(name);
    ok(&["make-dataset", "toy", "--per-class", per_class, "--seed", seed, "-o", s(&p)]);
    p
}

#[test]
fn toy_dataset_has_500_balanced_images() {
    let dir = tempfile::tempdir().unwrap();
    let p = toy(dir.path(), "toy.pxds", "50", "0");
    let ds = load_container(&p).unwrap();
    assert_eq!(ds.len(), 500);
    assert_eq!((ds.channels(), ds.height(), ds.width()), (3, 16, 16));
    let labels = ds.labels().unwrap();
    for k in 0..10u16 {
        assert_eq!(labels.iter().filter(|&&y| y == k).count(), 50);
    }
    assert!(fs::read_to_string(dir.path().join("toy.pxds.meta")).is_ok());
}

#[test]
fn class_subsample_writes_both_halves() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy(dir.path(), "toy.pxds", "4", "0");
    let (kept, held) = (dir.path().join("kept.pxds"), dir.path().join("held.pxds"));
    ok(&[
        "make-dataset", "subsample", "--input", s(&src), "--fraction", "0.5", "--mode", "class",
        "-o", s(&kept), "--held-out", s(&held),
    ]);
    let (a, b) = (load_container(&kept).unwrap(), load_container(&held).unwrap());
    assert_eq!(a.len() + b.len(), 40);
    assert_eq!((a.class_count(), b.class_count()), (5, 5));
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let json = ok(&["default-config", "--mode", "train-teacher"]);
    let p = dir.path().join("c.json");
    fs::write(&p, &json).unwrap();
    let c = proteus_cli::config::RunConfig::load(&p).unwrap();
    assert_eq!(c.to_json(), json);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = proteus(&["distill", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = proteus(&["train-teacher", "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset"), "{err}");
}

#[test]
fn bad_config_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), "toy.pxds", "2", "0");
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"schedule": {"base_lr": -1.0}}"#).unwrap();
    let out = proteus(&["train-teacher", "--config", s(&cfg), "--data", s(&data), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("schedule.base_lr"), "{err}");

    fs::write(&cfg, r#"{"sed": 1}"#).unwrap();
    let out = proteus(&["train-teacher", "--config", s(&cfg), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), "toy.pxds", "2", "0");
    let ck = dir.path().join("bad.prtc");
    fs::write(&ck, b"PRTC\x01\x00\x00\x00garbage").unwrap();
    let out = proteus(&["probe", "--checkpoint", s(&ck), "--train", s(&data), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn teacher_distill_probe_and_pca() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = toy(d, "train.pxds", "10", "0");
    let test = toy(d, "test.pxds", "4", "1");
    let teacher = d.join("teacher");
    ok(&["train-teacher", "--data", s(&train), "--steps", "6", "-o", s(&teacher)]);
    let ck = teacher.join("checkpoint.prtc");
    assert!(ck.is_file() && teacher.join("config.json").is_file());

    // Two identical seeded runs log identical bytes.
    let run = |name: &str| {
        let out = d.join(name);
        ok(&[
            "distill", "--data", s(&train), "--teacher", s(&ck), "--steps", "8", "--seed", "4", "-o",
            s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let (ma, mb) = (fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(ma, mb);
    let rows = read_metrics(&a.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.wall_ms == 0));

    let probe_dir = d.join("probe");
    ok(&[
        "probe", "--checkpoint", s(&a.join("checkpoint.prtc")), "--train", s(&train), "--test", s(&test),
        "-o", s(&probe_dir),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(probe_dir.join("probe.json")).unwrap()).unwrap();
    assert_eq!(report["grid"].as_array().unwrap().len(), 45);
    assert!(report["test_accuracy"].as_f64().is_some());

    let pca = d.join("pca");
    ok(&["visualize-pca", "--checkpoint", s(&ck), "--data", s(&test), "--images", "0,1", "-o", s(&pca)]);
    let tile = fs::read(pca.join("pca_0000.ppm")).unwrap();
    // 4×4 patch grid at 8 pixels per patch.
    assert!(tile.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(tile.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);
}
