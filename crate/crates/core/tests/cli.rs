//! End-to-end command-line tests: generate → run → export round trips,
//! calibration output, plot re-export identity, and the exit-code contract
//! (0 success, 2 configuration, 3 data, 4 engine).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn conftrace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conftrace"))
        .args(args)
        .output()
        .expect("spawn conftrace")
}

fn ok(args: &[&str]) -> String {
    let out = conftrace(args);
    assert!(
        out.status.success(),
        "conftrace {:?} exited {:?}: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(args: &[&str]) -> i32 {
    conftrace(args).status.code().expect("exit code")
}

/// Planted model plus a generated trial file under a fresh temp dir.
fn generated_workspace(n_trials: usize) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    let trials = dir.path().join("trials.json");
    ok(&["gen-toy", "--out", model.to_str().unwrap()]);
    ok(&[
        "gen-synthetic",
        "--model",
        model.to_str().unwrap(),
        "--out",
        trials.to_str().unwrap(),
        "--n",
        &n_trials.to_string(),
    ]);
    (dir, model, trials)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|entry| {
            let entry = entry.unwrap();
            let name = entry.file_name().into_string().unwrap();
            (name, std::fs::read(entry.path()).unwrap())
        })
        .collect()
}

/// A steering config restricted to sites where the planted model's
/// difference-of-means direction is defined (the newline carrier after the
/// cache layer); control sites are exactly constant and would be rejected.
const STEER_CONFIG: &str = r#"{
  "experiment": "steer",
  "layers": [4, 6],
  "roles": ["answer_newline"],
  "alphas": [-2.0, 2.0],
  "n_high": 30,
  "n_low": 30,
  "seed": 5
}"#;

#[test]
fn steer_round_trip_is_byte_identical_and_worker_independent() {
    let (dir, model, trials) = generated_workspace(160);
    let config = dir.path().join("steer.json");
    std::fs::write(&config, STEER_CONFIG).unwrap();

    let run = |out: &Path, workers: &str| {
        ok(&[
            "steer",
            "--model",
            model.to_str().unwrap(),
            "--trials",
            trials.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--workers",
            workers,
        ]);
        dir_bytes(out)
    };
    let first = run(&dir.path().join("out1"), "1");
    let second = run(&dir.path().join("out2"), "1");
    let parallel = run(&dir.path().join("out3"), "8");

    for name in [
        "steer_rows.csv",
        "steer_cells.csv",
        "steer_plot.csv",
        "steer_aggregate.json",
        "config.json",
    ] {
        assert!(first.contains_key(name), "{name} missing from output");
    }
    assert_eq!(first, second, "identical invocations diverged");
    for (name, bytes) in &first {
        if name == "config.json" {
            continue; // records the resolved worker count, which differs
        }
        assert_eq!(
            Some(bytes),
            parallel.get(name),
            "{name} differs across workers"
        );
    }
}

#[test]
fn calibrate_reports_every_trial_and_writes_artifacts() {
    let (dir, model, trials) = generated_workspace(160);
    let out = dir.path().join("cal");
    let stdout = ok(&[
        "calibrate",
        "--model",
        model.to_str().unwrap(),
        "--trials",
        trials.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        stdout.contains("n=160 excluded=0"),
        "unexpected summary: {stdout}"
    );
    let report = std::fs::read_to_string(out.join("calibration.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(parsed["n"], 160);
    let histogram = std::fs::read_to_string(out.join("calibration_histogram.csv")).unwrap();
    assert!(histogram.starts_with("class,count\n"));
    assert_eq!(histogram.lines().count(), 11, "ten classes plus a header");
}

#[test]
fn export_plots_rebuilds_the_published_tables_exactly() {
    let (dir, model, trials) = generated_workspace(160);
    let config = dir.path().join("steer.json");
    std::fs::write(&config, STEER_CONFIG).unwrap();
    let out = dir.path().join("out");
    ok(&[
        "steer",
        "--model",
        model.to_str().unwrap(),
        "--trials",
        trials.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);

    let rebuilt = dir.path().join("rebuilt");
    ok(&[
        "export-plots",
        "--aggregate",
        out.join("steer_aggregate.json").to_str().unwrap(),
        "--out",
        rebuilt.to_str().unwrap(),
    ]);
    let original = std::fs::read(out.join("steer_plot.csv")).unwrap();
    let regenerated = std::fs::read(rebuilt.join("steer_plot.csv")).unwrap();
    assert_eq!(original, regenerated, "re-exported plot table drifted");
}

#[test]
fn exit_codes_follow_the_contract() {
    let (dir, model, trials) = generated_workspace(60);

    // configuration errors exit 2: a config written for another family
    let config = dir.path().join("patch.json");
    std::fs::write(&config, r#"{"experiment": "patch", "layers": [4]}"#).unwrap();
    let out = conftrace(&[
        "steer",
        "--model",
        model.to_str().unwrap(),
        "--trials",
        trials.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("x1").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("config is for"),
        "missing kind-mismatch message"
    );

    // usage errors exit 2 as well
    assert_eq!(exit_code(&["steer", "--no-such-flag"]), 2);

    // data errors exit 3: the model directory does not exist
    assert_eq!(
        exit_code(&[
            "calibrate",
            "--model",
            dir.path().join("missing").to_str().unwrap(),
            "--trials",
            trials.to_str().unwrap(),
            "--out",
            dir.path().join("x2").to_str().unwrap(),
        ]),
        3
    );

    // engine-level errors exit 4: before the circuit writes anything the
    // read-out site is constant, so its difference-of-means direction is
    // degenerate
    let degenerate = dir.path().join("degenerate.json");
    std::fs::write(
        &degenerate,
        r#"{"experiment": "steer", "layers": [0], "roles": ["readout_colon"],
            "alphas": [2.0], "n_high": 10, "n_low": 10}"#,
    )
    .unwrap();
    assert_eq!(
        exit_code(&[
            "steer",
            "--model",
            model.to_str().unwrap(),
            "--trials",
            trials.to_str().unwrap(),
            "--config",
            degenerate.to_str().unwrap(),
            "--out",
            dir.path().join("x3").to_str().unwrap(),
        ]),
        4
    );
}
