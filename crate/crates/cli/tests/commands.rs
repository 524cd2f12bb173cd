use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use film_cli::synth::{self, QuestionCorpusConfig};

fn film(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_film")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = film(args);
    assert!(out.status.success(), "film {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn fixture(dir: &Path, pairs: usize, seed: u64) -> PathBuf {
    let cfg = QuestionCorpusConfig { pairs, topics: (pairs / 10).max(2), seed, ..Default::default() };
    let path = dir.join("pairs.tsv");
    std::fs::write(&path, synth::render_pairs(&synth::question_pairs(&cfg))).unwrap();
    path
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.ends_with("\tlabel") && !l.is_empty()).count()
}

#[test]
fn split_ten_pairs_eight_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), 10, 1);
    ok(&["split", "--input", &s(&input), "--out-dir", &s(dir.path()), "--seed", "3"]);
    assert_eq!(data_rows(&dir.path().join("train.tsv")), 8);
    assert_eq!(data_rows(&dir.path().join("val.tsv")), 2);
}

#[test]
fn split_rejects_full_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), 10, 1);
    let out = film(&["split", "--input", &s(&input), "--out-dir", &s(dir.path()), "--ratio", "1.0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("train.tsv").exists());
}

#[test]
fn missing_input_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bin");
    let out = film(&["train", "--input", &s(&dir.path().join("absent.tsv")), "--model", &s(&model)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!model.exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.tsv"));
}

#[test]
fn malformed_row_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.tsv");
    std::fs::write(&input, "a\tb\tone\ttwo\t1\nc\td\tthree\n").unwrap();
    let out = film(&["split", "--input", &s(&input), "--out-dir", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.tsv:2:"), "{err}");
}

#[test]
fn end_to_end_small_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| s(&dir.path().join(name));
    let input = fixture(dir.path(), 50, 4);
    ok(&["split", "--input", &s(&input), "--out-dir", &p(""), "--seed", "1"]);
    ok(&["train", "--input", &p("train.tsv"), "--model", &p("model.bin"), "--d", "4", "--max-iters", "20", "--trace", &p("trace.tsv")]);
    let first = std::fs::read(p("model.bin")).unwrap();
    ok(&["train", "--input", &p("train.tsv"), "--model", &p("model.bin"), "--d", "4", "--max-iters", "20"]);
    assert_eq!(first, std::fs::read(p("model.bin")).unwrap());
    assert!(std::fs::read_to_string(p("trace.tsv")).unwrap().lines().count() > 1);

    ok(&["select-k", "--model", &p("model.bin"), "--input", &p("val.tsv"), "--out-model", &p("tuned.bin"), "--table", &p("k.tsv"), "--k-min", "1", "--k-max", "5"]);
    let table = std::fs::read_to_string(p("k.tsv")).unwrap();
    assert!(table.starts_with("k\tce\taccuracy"));
    assert_eq!(table.lines().count(), 6);

    ok(&["predict", "--model", &p("tuned.bin"), "--input", &p("val.tsv"), "--out", &p("pred.tsv")]);
    assert_eq!(std::fs::read_to_string(p("pred.tsv")).unwrap().lines().count(), data_rows(&dir.path().join("val.tsv")));
    let report = ok(&["evaluate", "--predictions", &p("pred.tsv"), "--input", &p("val.tsv")]);
    assert!(report.contains("accuracy\t"));
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.tsv");
    let preds = dir.path().join("pred.tsv");
    std::fs::write(&pairs, "a\tb\tx y\tx y\t1\nc\td\tp q\tr s\t0\ne\tf\tu v\tu w\t1\n").unwrap();
    std::fs::write(&preds, "0\t0.9\t1\n1\t0.2\t0\n2\t0.7\t1\n").unwrap();
    let report = ok(&["evaluate", "--predictions", &s(&preds), "--input", &s(&pairs), "--metrics", "accuracy,rates"]);
    assert!(report.lines().any(|l| l == "accuracy\t1"), "{report}");
    assert!(report.lines().any(|l| l.starts_with("fpr\t0")), "{report}");
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(film(&["frobnicate"]).status.code(), Some(1));
}
