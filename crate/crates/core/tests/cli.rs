//! End-to-end checks of the `mtn-tct` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtn_tct::cli::feature_dims;
use mtn_tct::config::RunConfig;
use mtn_tct::data::corpus::load_corpus;
use mtn_tct::data::Vocabulary;
use mtn_tct::model::MtnTct;

fn mtn_tct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtn-tct")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mtn_tct(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn metric(report: &str, name: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(name).and_then(|v| v.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no `{name}` in report:\n{report}"))
        .parse()
        .unwrap()
}

fn small_data(dir: &Path) {
    ok(
        dir,
        &["gen-data", "--out", "data", "--seed", "3", "--set", "train_size=40", "--set", "valid_size=8", "--set", "test_size=8"],
    );
}

#[test]
fn evaluating_references_against_themselves_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let report = ok(dir.path(), &["eval", "--hyp", "data/test.jsonl", "--ref", "data/test.jsonl", "--out", "eval"]);
    for n in 1..=4 {
        assert_eq!(metric(&report, &format!("bleu_{n}")), 1.0, "{report}");
    }
    assert_eq!(metric(&report, "rouge_l"), 1.0);
    assert_eq!(fs::read_to_string(dir.path().join("eval/report.txt")).unwrap(), report);
    assert!(dir.path().join("eval/config.toml").exists());
}

#[test]
fn zero_steps_keeps_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    ok(dir.path(), &["train", "--config", "data/config.toml", "--out", "run", "--set", "max_steps=0"]);

    let config = RunConfig::resolve(Some(&dir.path().join("run/config.toml")), &[]).unwrap();
    let data = dir.path().join(&config.data_dir);
    let vocab = Vocabulary::load(&data.join("vocab.txt")).unwrap();
    let examples = load_corpus(&data.join("train.jsonl")).unwrap().examples(&vocab).unwrap();
    let (visual, audio) = feature_dims(&examples);
    let init = MtnTct::new(config.model_config(vocab.len(), visual, audio), config.seed).unwrap();
    let path = dir.path().join("init.ckpt");
    init.save(&path).unwrap();
    assert_eq!(fs::read(path).unwrap(), fs::read(dir.path().join("run/best.ckpt")).unwrap());
}

#[test]
fn configuration_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = mtn_tct(dir.path(), &["gen-data", "--out", "data", "--set", "d_modle=16"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("d_modle"));
    assert!(!dir.path().join("data").exists());

    let bad_file = dir.path().join("bad.toml");
    fs::write(&bad_file, "heads = 4\nbogus = true\n").unwrap();
    let out = mtn_tct(dir.path(), &["gen-data", "--out", "data", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(mtn_tct(dir.path(), &["gradcheck", "--scope", "everything"]).status.code(), Some(2));
    assert_eq!(mtn_tct(dir.path(), &["eval", "--hyp", "h.jsonl", "--out", "e"]).status.code(), Some(2));
    assert_eq!(mtn_tct(dir.path(), &["eval", "--hyp", "h", "--ref", "r", "--refs", "0", "--out", "e"]).status.code(), Some(2));
    assert_eq!(mtn_tct(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_failure_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtn_tct(dir.path(), &["eval", "--hyp", "missing.jsonl", "--ref", "missing.jsonl", "--out", "e"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}

#[test]
fn gradcheck_scopes_pass() {
    let dir = tempfile::tempdir().unwrap();
    for scope in ["primitives", "attention", "tct"] {
        let report = ok(dir.path(), &["gradcheck", "--scope", scope, "--out", scope]);
        assert!(report.trim_end().ends_with("PASS"), "{report}");
        assert_eq!(fs::read_to_string(dir.path().join(scope).join("gradcheck.txt")).unwrap(), report);
    }
}

#[test]
fn checkpoint_dimension_mismatch_names_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    ok(dir.path(), &["train", "--config", "data/config.toml", "--out", "run", "--set", "max_steps=0"]);
    let out = mtn_tct(
        dir.path(),
        &[
            "translate", "--config", "run/config.toml", "--set", "d_model=16", "--set", "d_ff=64",
            "--checkpoint", "run/best.ckpt", "--input", "data/test.jsonl", "--out", "hyp",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dimension mismatch") && err.contains("32") && err.contains("16"), "{err}");
}

#[test]
fn reversal_pipeline_reaches_near_perfect_bleu() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "data", "--seed", "1", "--set", "mapping=reversal"]);
    let trained = ok(
        d,
        &["train", "--config", "data/config.toml", "--out", "run", "--set", "max_steps=2000", "--set", "validate_every=200"],
    );
    assert!(trained.starts_with("best step"), "{trained}");
    ok(d, &["translate", "--config", "run/config.toml", "--checkpoint", "run/best.ckpt", "--input", "data/test.jsonl", "--out", "hyp"]);
    let report = ok(d, &["eval", "--hyp", "hyp/hypotheses.jsonl", "--ref", "data/test.jsonl", "--out", "eval"]);
    assert!(metric(&report, "bleu_4") >= 0.95, "{report}");
}
