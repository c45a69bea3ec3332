mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::fixture;

fn muscle_eval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muscle-eval"))
        .args(args)
        .env_remove("MUSCLE_EVAL_OUT_DIR")
        .env_remove("MUSCLE_EVAL_JOBS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn generate(out: &Path, count: &str) {
    let o = muscle_eval(&["phantom", "generate", "--out", out.to_str().unwrap(), "--count", count, "--dims", "24"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn classify_prints_stable_json() {
    let o = muscle_eval(&["classify", "--series-description", "AX T1 DIXON WATER"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["name"], "dixon-t1 water");
    assert_eq!(v["base"], "dixon-t1");
    assert_eq!(v["phase"], "water");

    let o = muscle_eval(&["classify", "--series-description", "SAG T2 FS", "--protocol-description", "MRI knee left"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["sequence"]["name"], "t2 fs");
    assert!(stdout(&o).ends_with('\n'));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&muscle_eval(&[])), 2);
    assert_eq!(code(&muscle_eval(&["frobnicate"])), 2);
    assert_eq!(code(&muscle_eval(&["ensemble", "--inputs", "a.nii", "--output", "o.nii"])), 2);
    assert_eq!(code(&muscle_eval(&["evaluate", "--config", "/nonexistent/config.json"])), 2);
    assert_eq!(code(&muscle_eval(&["--help"])), 0);
}

#[test]
fn split_reads_the_fixture_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan.json");
    let o = muscle_eval(&[
        "split",
        "--input",
        fixture("split_cohort.csv").to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert!(!plan["test_a"].as_array().unwrap().is_empty());
    assert!(!plan["test_b"].as_array().unwrap().is_empty());
}

#[test]
fn phantom_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(a.path(), "2");
    generate(b.path(), "2");
    for rel in ["cohort.csv", "config.json", "cases/S00000/mask.nii", "cases/S00001/model_b.nii"] {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        let y = std::fs::read(b.path().join(rel)).unwrap();
        assert_eq!(x, y, "{rel}");
    }
}

#[test]
fn evaluate_writes_reports_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "3");
    let config = dir.path().join("config.json");
    let o = muscle_eval(&["evaluate", "--config", config.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = dir.path().join("report");
    for name in [
        "cases.csv",
        "cases_model_a.csv",
        "cases_model_b.csv",
        "cases_reference.csv",
        "summary.json",
        "statistics.json",
    ] {
        assert!(report.join(name).is_file(), "{name}");
    }
    let cases = std::fs::read_to_string(report.join("cases.csv")).unwrap();
    assert_eq!(cases.lines().count(), 4);

    // The environment redirects output; a flag beats the environment.
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");
    let run = |extra: &[&str]| {
        let mut args = vec!["evaluate", "--config", config.to_str().unwrap()];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_muscle-eval"))
            .args(&args)
            .env("MUSCLE_EVAL_OUT_DIR", &env_dir)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run(&[])), 0);
    assert!(env_dir.join("summary.json").is_file());
    assert_eq!(code(&run(&["--out-dir", flag_dir.to_str().unwrap()])), 0);
    assert!(flag_dir.join("summary.json").is_file());
    assert_eq!(
        std::fs::read(env_dir.join("statistics.json")).unwrap(),
        std::fs::read(report.join("statistics.json")).unwrap()
    );

    // A missing prediction for one case is a case failure (3); for all, 4.
    std::fs::remove_file(dir.path().join("cases/S00001/model_a.nii")).unwrap();
    assert_eq!(code(&muscle_eval(&["evaluate", "--config", config.to_str().unwrap()])), 3);
    for id in ["S00000", "S00002"] {
        std::fs::remove_file(dir.path().join(format!("cases/{id}/model_a.nii"))).unwrap();
    }
    assert_eq!(code(&muscle_eval(&["evaluate", "--config", config.to_str().unwrap()])), 4);
}

#[test]
fn ensemble_and_quantify_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "1");
    let case = dir.path().join("cases/S00000");
    let (a, b) = (case.join("model_a.nii"), case.join("model_b.nii"));
    let (mean, mask) = (dir.path().join("mean.nii"), dir.path().join("mask.nii"));
    let o = muscle_eval(&[
        "ensemble",
        "--inputs",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--output",
        mean.to_str().unwrap(),
        "--mask-output",
        mask.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let from_mask = muscle_eval(&["quantify", "--input", mask.to_str().unwrap(), "--height-m", "1.7"]);
    let from_map =
        muscle_eval(&["quantify", "--input", mean.to_str().unwrap(), "--threshold", "0.5", "--height-m", "1.7"]);
    assert_eq!(code(&from_mask), 0);
    assert_eq!(stdout(&from_mask), stdout(&from_map));
    // A probability map is not a mask without a threshold.
    assert_eq!(code(&muscle_eval(&["quantify", "--input", mean.to_str().unwrap()])), 3);
}

#[test]
fn preprocess_writes_model_space_stack() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "1");
    let out = dir.path().join("stack.nii");
    let image = dir.path().join("cases/S00000/image.nii");
    let o = muscle_eval(&[
        "preprocess",
        "--input",
        image.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--size",
        "64",
        "--quantize-u8",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = muscle_eval::nifti::read_nifti(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(v.geometry().dims(), [64, 64, 24]);
    assert!(v.voxels().iter().all(|x| (0.0..=255.0).contains(x) && x.fract() == 0.0));
}
