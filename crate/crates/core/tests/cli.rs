mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ovdet::EvalReport;

fn ovdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovdet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dictionary").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["build-dict", "gen-data", "pseudo-label", "train", "eval", "enrich"] {
        let out = ovdet(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one_and_name_the_flag() {
    assert_eq!(ovdet(&["frobnicate"]).status.code(), Some(1));
    let out = ovdet(&["eval", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus-flag"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = ovdet(&["enrich", "--dict", s(&dir.path().join("missing.jsonl")), "--name", "cat"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn enrich_prints_definitions_and_retrieved_definitions() {
    let out = ovdet(&[
        "enrich",
        "--dict",
        s(&fixture("golden.jsonl")),
        "--provider",
        &format!("file:{}", s(&fixture("embeddings.jsonl"))),
        "--name",
        "person",
        "--name",
        "High Heels",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "person, a human being.\nHigh Heels, a woman's shoe with a thin, high tapering heel.\n"
    );
}

#[test]
fn five_command_pipeline_with_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let ok = |args: &[&str]| {
        let out = ovdet(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["gen-data", "--out", s(&data), "--num-images", "40", "--seed", "1"]);
    ok(&[
        "build-dict",
        "--detection-names",
        s(&data.join("detection_names.txt")),
        "--things-names",
        s(&data.join("things_names.txt")),
        "--captions",
        s(&data.join("captions.txt")),
        "--lexicon",
        s(&data.join("lexicon.jsonl")),
        "--min-freq",
        "2",
        "--out",
        s(&d.join("dict.jsonl")),
    ]);
    ok(&[
        "pseudo-label",
        "--records",
        s(&data.join("imagetext.jsonl")),
        "--proposals",
        s(&data.join("proposals.jsonl")),
        "--dict",
        s(&d.join("dict.jsonl")),
        "--min-area",
        "64",
        "--use-dictionary",
        "--out",
        s(&d.join("pl.jsonl")),
    ]);
    let config = serde_json::json!({ "model": common::tiny_model(), "batch_size": 4 });
    std::fs::write(d.join("train.json"), config.to_string()).unwrap();
    ok(&[
        "train",
        "--config",
        s(&d.join("train.json")),
        "--detection",
        s(&data.join("detection.jsonl")),
        "--grounding",
        s(&data.join("grounding.jsonl")),
        "--imagetext",
        s(&data.join("imagetext.jsonl")),
        "--pseudo-labels",
        s(&d.join("pl.jsonl")),
        "--dict",
        s(&d.join("dict.jsonl")),
        "--exclude",
        s(&data.join("holdout_names.txt")),
        "--epochs",
        "2",
        "--out-dir",
        s(&d.join("run")),
    ]);
    ok(&[
        "eval",
        "--checkpoint",
        s(&d.join("run/final.safetensors")),
        "--records",
        s(&data.join("eval.jsonl")),
        "--concepts",
        s(&data.join("concepts.txt")),
        "--holdout",
        s(&data.join("holdout_names.txt")),
        "--dict",
        s(&d.join("dict.jsonl")),
        "--out",
        s(&d.join("report.json")),
    ]);
    let report = EvalReport::load(&d.join("report.json")).unwrap();
    assert_eq!(report.per_concept.len(), 12);
    assert!(report.unseen_mean_ap.is_some());
}
