//! End-to-end checks of the binary: artifact flow and exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hjbfit"))
}

fn config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs/ou_example.json")
        .display()
        .to_string()
}

#[test]
fn generate_fit_evaluate_flow() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    for verb in ["generate", "fit", "evaluate"] {
        let status = bin()
            .args([
                "--config",
                &config(),
                "--out",
                &out,
                "--override",
                "data.n=200",
                "--override",
                "evaluation.n_eval=500",
                "--override",
                "evaluation.cloud_paths=64",
                verb,
            ])
            .status()
            .unwrap();
        assert!(status.success(), "{verb} failed");
    }
    for file in ["dataset.jsonl", "model.json", "fit_report.json", "trace.csv", "evaluation.json"] {
        assert!(dir.path().join(file).exists(), "missing {file}");
    }
}

#[test]
fn invalid_config_exits_2() {
    let status = bin()
        .args(["--config", "/nonexistent/config.json", "generate"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn invalid_override_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "--config",
            &config(),
            "--out",
            &dir.path().display().to_string(),
            "--override",
            "problem.alpha=-1.0",
            "generate",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_dataset_for_fit_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "--config",
            &config(),
            "--out",
            &dir.path().display().to_string(),
            "fit",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
