//! End-to-end exercises of the `neuroens` binary: exit codes, the JSON
//! error contract on stderr, and a miniature dataset driven through
//! every subcommand.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::tempdir;

fn neuroens(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuroens"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

/// Parses the single-line error record the binary prints on failure.
fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_else(|| panic!("empty stderr"));
    serde_json::from_str(line)
        .unwrap_or_else(|e| panic!("stderr is not an error line ({e}): {text}"))
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempdir().unwrap();
    let none = neuroens(&[], dir.path());
    assert_eq!(none.status.code(), Some(2));
    let unknown = neuroens(&["phantom", "--bogus-flag"], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn infer_shapes_prints_a_trace() {
    let dir = tempdir().unwrap();
    let out = neuroens(
        &["infer-shapes", "--model", "custom_cnn", "--height", "44", "--width", "52"],
        dir.path(),
    );
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max_pool"), "trace missing pooling rows: {text}");
    assert!(text.contains("flatten"), "trace missing flatten row: {text}");
    assert!(text.contains("44x52x3"), "trace missing input shape: {text}");
}

#[test]
fn missing_config_is_a_file_not_found_error() {
    let dir = tempdir().unwrap();
    let out = neuroens(
        &["run", "--config", "absent.json", "--run", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_error(&out);
    assert_eq!(err["error"], "FileNotFound");
    assert!(err["message"].as_str().unwrap().contains("absent.json"));
}

#[test]
fn sample_commands_chain_and_respect_overwrite() {
    let dir = tempdir().unwrap();
    let root = dir.path();

    let phantom = neuroens(
        &[
            "phantom", "--out", "raw", "--per-class", "2", "--classes", "CN,AD",
            "--dims", "24,24,24", "--spacing", "2,2,2", "--noise-sigma", "0.01",
            "--no-jitter", "--seed", "7",
        ],
        root,
    );
    assert_ok(&phantom);
    assert_eq!(stdout_json(&phantom)["subjects"], 4);

    let prep = neuroens(
        &[
            "preprocess", "--manifest", "raw/manifest.csv", "--out", "prep",
            "--height", "32", "--width", "36",
        ],
        root,
    );
    assert_ok(&prep);
    assert_eq!(stdout_json(&prep)["samples"], 12);
    assert!(root.join("prep/CN001_s0.nii").is_file());

    let aug = neuroens(
        &[
            "augment", "--manifest", "prep/manifest.csv", "--target", "8",
            "--out", "aug", "--seed", "7",
        ],
        root,
    );
    assert_ok(&aug);
    let summary = stdout_json(&aug);
    assert_eq!(summary["samples"], 16);
    assert_eq!(summary["per_class"]["CN"], 8);
    assert_eq!(summary["per_class"]["AD"], 8);
    let manifest = std::fs::read_to_string(root.join("aug/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 17, "header plus 16 rows");

    // A second run must refuse to clobber the output without --overwrite.
    let refused = neuroens(
        &[
            "augment", "--manifest", "prep/manifest.csv", "--target", "8",
            "--out", "aug", "--seed", "7",
        ],
        root,
    );
    assert_eq!(refused.status.code(), Some(1));
    assert_eq!(stderr_error(&refused)["error"], "AlreadyExists");
    let forced = neuroens(
        &[
            "augment", "--manifest", "prep/manifest.csv", "--target", "8",
            "--out", "aug", "--seed", "7", "--overwrite",
        ],
        root,
    );
    assert_ok(&forced);
}

#[test]
fn train_evaluate_ensemble_roc_chain() {
    let dir = tempdir().unwrap();
    let root = dir.path();

    for (cmd, check) in [
        (
            vec![
                "phantom", "--out", "raw", "--per-class", "5", "--classes", "CN,AD",
                "--dims", "24,24,24", "--spacing", "2,2,2", "--noise-sigma", "0.01",
                "--no-jitter", "--seed", "7",
            ],
            "phantom",
        ),
        (
            vec![
                "preprocess", "--manifest", "raw/manifest.csv", "--out", "prep",
                "--height", "32", "--width", "36",
            ],
            "preprocess",
        ),
    ] {
        let out = neuroens(&cmd, root);
        assert!(out.status.success(), "{check}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let train = neuroens(
        &[
            "train", "--data", "prep", "--model", "custom_cnn", "--task", "ad_vs_cn",
            "--epochs", "2", "--batch-size", "4", "--width-multiplier", "0.125",
            "--augment-factor", "1", "--seed", "7", "--out", "cnn.ckpt",
            "--history-out", "history.json", "--split-out", "split.json",
        ],
        root,
    );
    assert_ok(&train);
    let meta = stdout_json(&train);
    assert_eq!(meta["epochs"], 2);
    assert!(root.join("cnn.ckpt").is_file());
    let history: Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("history.json")).unwrap())
            .unwrap();
    assert_eq!(history.as_array().unwrap().len(), 2);

    let eval = neuroens(
        &[
            "evaluate", "--data", "prep", "--split", "split.json", "--checkpoint",
            "cnn.ckpt", "--task", "ad_vs_cn", "--predictions-out", "preds.json",
        ],
        root,
    );
    assert_ok(&eval);
    let row = stdout_json(&eval);
    assert_eq!(row["model"], "custom_cnn");
    assert_eq!(row["n"], 6, "two held-out subjects, three slices each");
    let auc = row["auc"].as_f64().expect("binary task reports AUC");
    assert!((0.0..=1.0).contains(&auc));

    // A committee of three copies of one model must vote exactly like it.
    let vote = neuroens(
        &[
            "ensemble", "--predictions", "preds.json", "--predictions", "preds.json",
            "--predictions", "preds.json",
        ],
        root,
    );
    assert_ok(&vote);
    let voted = stdout_json(&vote);
    let preds: Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("preds.json")).unwrap())
            .unwrap();
    assert_eq!(voted["labels"], preds["labels"]);
    assert_eq!(voted["sample_ids"], preds["sample_ids"]);

    let roc = neuroens(
        &[
            "roc", "--predictions", "preds.json", "--manifest", "prep/manifest.csv",
            "--task", "ad_vs_cn", "--out-csv", "roc.csv", "--out-svg", "roc.svg",
        ],
        root,
    );
    assert_ok(&roc);
    assert_eq!(stdout_json(&roc)["auc"].as_f64().unwrap(), auc);
    assert!(root.join("roc.csv").is_file());
    assert!(root.join("roc.svg").is_file());

    // Four-class predictions have no single positive class to sweep.
    let refused = neuroens(
        &[
            "roc", "--predictions", "preds.json", "--manifest", "prep/manifest.csv",
            "--task", "four_class", "--out-csv", "r2.csv", "--overwrite",
        ],
        root,
    );
    assert_eq!(refused.status.code(), Some(1));
    assert_eq!(stderr_error(&refused)["error"], "InvalidConfig");
}

#[test]
fn run_writes_report_and_provenance_detects_tampering() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    let config = r#"{
  "task": "four_class",
  "models": ["custom_cnn"],
  "epochs": 2,
  "batch_size": 8,
  "subjects_per_class": 4,
  "phantom_dims": [24, 24, 24],
  "phantom_spacing": [2.0, 2.0, 2.0],
  "noise_sigma": 0.01,
  "jitter": false,
  "input_size": [32, 36],
  "augment_factor": 1.0,
  "seed": 31
}"#;
    std::fs::write(root.join("config.json"), config).unwrap();

    let run = neuroens(
        &["run", "--config", "config.json", "--run", "run"],
        root,
    );
    assert_ok(&run);
    let report = stdout_json(&run);
    assert_eq!(report["task"], "four_class");
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(root.join("run/report.json").is_file());

    let prov = neuroens(&["provenance", "--run", "run"], root);
    assert_ok(&prov);
    let record = stdout_json(&prov);
    assert_eq!(record["matches"], true);
    assert_eq!(record["seed"], 31);

    // Touch one byte of the stored config: the recorded hash must stop
    // matching and the command must fail loudly.
    let stored = std::fs::read_to_string(root.join("run/config.json")).unwrap();
    std::fs::write(
        root.join("run/config.json"),
        stored.replace("\"seed\": 31", "\"seed\": 32"),
    )
    .unwrap();
    let tampered = neuroens(&["provenance", "--run", "run"], root);
    assert_eq!(tampered.status.code(), Some(1));
    assert_eq!(stdout_json(&tampered)["matches"], false);
    assert_eq!(stderr_error(&tampered)["error"], "ProvenanceMismatch");

    // Resuming against the tampered config must be refused too.
    let resumed = neuroens(
        &["run", "--config", "config.json", "--run", "run"],
        root,
    );
    assert_eq!(resumed.status.code(), Some(1));
    assert_eq!(stderr_error(&resumed)["error"], "InvalidConfig");

    let not_a_run = neuroens(&["provenance", "--run", "raw"], root);
    assert_eq!(not_a_run.status.code(), Some(1));
    assert_eq!(stderr_error(&not_a_run)["error"], "NotARunDirectory");
}
