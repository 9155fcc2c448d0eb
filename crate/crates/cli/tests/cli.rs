use std::path::PathBuf;
use std::process::{Command, Stdio};

use scamlens_cli::run;
use scamlens_core::classifier::{Pipeline, VerdictReport};
use scamlens_core::config::PipelineConfig;
use scamlens_core::corpus::{load_corpus, Consensus};
use scamlens_core::evaluation::{classify_corpus, evaluate, labeled_scores, EvalReport, TuneOutcome};
use scamlens_core::redflag::FlagCategory;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run_args(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(
        std::iter::once("scamlens").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scamlens"))
}

#[test]
fn scan_fixture_exits_two_with_six_categories() {
    let out = bin()
        .args([
            "scan",
            fixture("rackspace_phish.eml").to_str().unwrap(),
            "--backend",
            "mock",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8(out.stdout).unwrap();
    let listed = FlagCategory::ALL
        .iter()
        .filter(|c| text.contains(c.as_str()))
        .count();
    assert!(listed >= 6, "only {listed} categories in:\n{text}");
    assert!(text.contains("\"wwwthefitdollar.com/gabbyr\""));
}

#[test]
fn scan_clean_exits_zero() {
    let out = bin()
        .args([
            "scan",
            fixture("clean.eml").to_str().unwrap(),
            "--backend",
            "mock",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("flags      none"));
}

#[test]
fn scan_reads_stdin_and_plain_text() {
    use std::io::Write;
    let mut child = bin()
        .args(["scan", "-", "--json"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"Hi Ana,\n\nSee you at lunch tomorrow.\n\nBest,\nLuis\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: VerdictReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.flags.is_empty());
}

#[test]
fn usage_and_file_errors_exit_one() {
    let (code, _, err) = run_args(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.contains("frobnicate"));

    let (code, _, err) = run_args(&["scan", "/definitely/not/here.eml"]);
    assert_eq!(code, 1);
    assert!(err.contains("/definitely/not/here.eml"));

    let (code, _, err) = run_args(&["scan", "x", "--backend", "quantum"]);
    assert_eq!(code, 1);
    assert!(err.contains("quantum"));

    let (code, _, err) = run_args(&[
        "eval",
        "--corpus",
        fixture("rackspace_phish.eml").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("line 1"), "{err}");

    let (code, out, _) = run_args(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("scan"));
}

#[test]
fn threshold_flag_changes_decision() {
    let path = fixture("rackspace_phish.eml");
    let (code, out, _) = run_args(&["scan", path.to_str().unwrap(), "--threshold", "0.999", "--json"]);
    assert_eq!(code, 0);
    let report: VerdictReport = serde_json::from_str(&out).unwrap();
    assert_eq!(report.threshold, 0.999);
}

#[test]
fn example_config_loads() {
    let config = PipelineConfig::load(&fixture("pipeline.toml")).unwrap();
    assert_eq!(config, PipelineConfig::default());
    let (code, _, err) = run_args(&[
        "--config",
        fixture("pipeline.toml").to_str().unwrap(),
        "scan",
        fixture("clean.eml").to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn eval_matches_library() {
    let corpus_path = fixture("synthetic.corpus");
    let (code, out, err) = run_args(&[
        "eval",
        "--corpus",
        corpus_path.to_str().unwrap(),
        "--backend",
        "mock",
        "--json",
    ]);
    assert_eq!(code, 0, "{err}");
    let cli: EvalReport = serde_json::from_str(&out).unwrap();

    let corpus = load_corpus(&corpus_path).unwrap();
    let scored = classify_corpus(&Pipeline::new(PipelineConfig::default()).unwrap(), &corpus).unwrap();
    let (scores, truth) = labeled_scores(&scored);
    let lib = evaluate(&scores, &truth, 0.5).unwrap();
    assert_eq!(cli, lib);
}

#[test]
fn eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let fp = dir.path().join("fp.md");
    let (code, out, _) = run_args(&[
        "eval",
        "--corpus",
        fixture("synthetic.corpus").to_str().unwrap(),
        "--threshold",
        "0.1",
        "--report",
        report.to_str().unwrap(),
        "--fp-report",
        fp.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("precision"));
    let parsed: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.threshold, 0.1);
    // At 0.1 the one legitimate message with a weak flag becomes a false positive.
    let md = std::fs::read_to_string(&fp).unwrap();
    assert!(md.contains("## l03"), "{md}");
}

#[test]
fn sweep_and_batch() {
    let corpus = fixture("synthetic.corpus");
    let (code, out, _) = run_args(&[
        "sweep",
        "--corpus",
        corpus.to_str().unwrap(),
        "--grid",
        "0.1,0.5,0.9",
    ]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 4);

    let (code, _, err) = run_args(&["sweep", "--corpus", corpus.to_str().unwrap(), "--grid", "0.5,0.1"]);
    assert_eq!(code, 1);
    assert!(err.contains("ascending"));

    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.jsonl");
    let (code, out, _) = run_args(&[
        "batch",
        "--corpus",
        corpus.to_str().unwrap(),
        "--results",
        results.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("phish1"));
    assert_eq!(std::fs::read_to_string(&results).unwrap().lines().count(), 24);
}

#[test]
fn tune_is_reproducible_and_uses_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("scores.json");
    let tuned = dir.path().join("tuned.toml");
    let corpus = fixture("synthetic.corpus");
    let args = [
        "tune",
        "--corpus",
        corpus.to_str().unwrap(),
        "--seed",
        "11",
        "--json",
        "--cache",
        cache.to_str().unwrap(),
        "--write-config",
        tuned.to_str().unwrap(),
    ];
    let (code, first, err) = run_args(&args);
    assert_eq!(code, 0, "{err}");
    assert!(cache.exists());
    let (_, second, _) = run_args(&args);
    assert_eq!(first, second);
    let outcome: TuneOutcome = serde_json::from_str(&first).unwrap();
    assert_eq!(outcome.mean_f1, 1.0);
    let config = PipelineConfig::load(&tuned).unwrap();
    assert_eq!(config.threshold, outcome.threshold);
    assert_eq!(config.fusion, outcome.weights);
}

#[test]
fn export_labels_applies_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("labels.jsonl");
    std::fs::write(
        &log,
        r#"{"seq":1,"example_id":"d02","annotator_id":"ann3","label":"legitimate","timestamp":"2024-01-01T00:00:00Z"}"#,
    )
    .unwrap();
    let out_path = dir.path().join("export.corpus");
    let (code, _, err) = run_args(&[
        "export-labels",
        "--corpus",
        fixture("synthetic.corpus").to_str().unwrap(),
        "--labels",
        log.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let exported = load_corpus(&out_path).unwrap();
    assert_eq!(exported.get("d02").unwrap().consensus, Consensus::Legitimate);
    assert_eq!(exported.examples.len(), 24);
}
