//! End-to-end checks of the command-line surface: exit codes, produced
//! artifacts, and argument validation.

use std::path::Path;
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_deepboots")
}

fn write_toy_csv(path: &Path) {
    let mut csv = String::from("date,alpha,beta\n");
    for t in 0..260 {
        let x = t as f64;
        csv.push_str(&format!(
            "row{t},{},{}\n",
            (x * 0.31).sin() + 0.01 * x,
            (x * 0.17).cos() * 2.0
        ));
    }
    std::fs::write(path, csv).expect("toy CSV written");
}

/// A trained toy checkpoint plus its dataset, shared by the read-only tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    checkpoint: std::path::PathBuf,
}

fn trained_fixture() -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("toy.csv");
    write_toy_csv(&data);
    let out = dir.path().join("train");
    let status = Command::new(binary())
        .args(["train", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .args([
            "--input-len", "8", "--pred-len", "4", "--blocks", "2", "--embed", "8",
            "--heads", "2", "--epochs", "1",
        ])
        .status()
        .expect("train runs");
    assert!(status.success());
    Fixture {
        checkpoint: out.join("checkpoint.json"),
        data,
        _dir: dir,
    }
}

#[test]
fn usage_errors_exit_with_code_2() {
    // Missing required --data.
    let out = Command::new(binary()).arg("train").output().expect("runs");
    assert_eq!(out.status.code(), Some(2), "missing --data");

    let fx = trained_fixture();

    // Unknown metric token.
    let out = Command::new(binary())
        .args(["eval", "--checkpoint"])
        .arg(&fx.checkpoint)
        .arg("--data")
        .arg(&fx.data)
        .args(["--metrics", "mse,bogus"])
        .output()
        .expect("runs");
    assert_eq!(out.status.code(), Some(2), "unknown metric");
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    // Malformed ablation variant.
    let out = Command::new(binary())
        .args(["ablate", "--data"])
        .arg(&fx.data)
        .args(["--variants", "-Q"])
        .output()
        .expect("runs");
    assert_eq!(out.status.code(), Some(2), "bad variant");
}

#[test]
fn runtime_failures_exit_with_code_1() {
    let fx = trained_fixture();

    // Window index beyond the test split.
    let out = Command::new(binary())
        .args(["decompose", "--checkpoint"])
        .arg(&fx.checkpoint)
        .arg("--data")
        .arg(&fx.data)
        .args(["--window-index", "100000"])
        .output()
        .expect("runs");
    assert_eq!(out.status.code(), Some(1), "out-of-range window");
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));

    // Nonexistent dataset.
    let out = Command::new(binary())
        .args(["eval", "--checkpoint"])
        .arg(&fx.checkpoint)
        .args(["--data", "/nonexistent.csv"])
        .output()
        .expect("runs");
    assert_eq!(out.status.code(), Some(1), "missing dataset file");
}

#[test]
fn eval_writes_requested_metrics_and_manifest() {
    let fx = trained_fixture();
    let out_dir = tempfile::tempdir().expect("tempdir");
    let status = Command::new(binary())
        .args(["eval", "--checkpoint"])
        .arg(&fx.checkpoint)
        .arg("--data")
        .arg(&fx.data)
        .args(["--metrics", "mse,mae,smape,mase:2,quantile:0.75"])
        .arg("--out")
        .arg(out_dir.path())
        .status()
        .expect("runs");
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.path().join("metrics.json")).expect("metrics written"),
    )
    .expect("valid JSON");
    for key in ["mse", "mae", "smape", "mase_2", "quantile_0.75"] {
        assert!(
            report["values"][key].is_f64(),
            "metric {key} missing from report"
        );
    }
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.path().join("manifest.json")).expect("manifest written"),
    )
    .expect("valid JSON");
    assert_eq!(manifest["command"], "eval");
    assert!(manifest["dataset_fingerprint"].is_string());
}

#[test]
fn decompose_writes_one_file_per_block_plus_residual() {
    let fx = trained_fixture();
    let out_dir = tempfile::tempdir().expect("tempdir");
    let status = Command::new(binary())
        .args(["decompose", "--checkpoint"])
        .arg(&fx.checkpoint)
        .arg("--data")
        .arg(&fx.data)
        .arg("--out")
        .arg(out_dir.path())
        .status()
        .expect("runs");
    assert!(status.success());
    // Two blocks were trained, so two contribution files.
    for name in ["block_1.csv", "block_2.csv", "residual.csv"] {
        let text = std::fs::read_to_string(out_dir.path().join(name))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(text.lines().count() > 1, "{name} has no data rows");
    }
    assert!(!out_dir.path().join("block_3.csv").exists());
}

#[test]
fn theory_subcommand_passes_and_writes_report() {
    let out_dir = tempfile::tempdir().expect("tempdir");
    let output = Command::new(binary())
        .args(["theory", "--trials", "20000", "--out"])
        .arg(out_dir.path())
        .output()
        .expect("runs");
    assert!(
        output.status.success(),
        "theory checks failed: {}",
        String::from_utf8_lossy(&output.stdout)
    );
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.path().join("theory.json")).expect("report written"),
    )
    .expect("valid JSON");
    assert_eq!(report["pass"], true);
    assert_eq!(report["checks"].as_array().expect("check list").len(), 6);
}
