//! `scamlens` command-line tool and HTTP service.
//!
//! [`run`] takes the argument vector and output streams and returns the
//! process exit code: for `scan`, 0 = legitimate and 2 = scam; for every
//! other subcommand 0 = success. Errors of any kind exit 1.

pub mod service;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scamlens_core::annotation::{AnnotationStore, BatchResult};
use scamlens_core::classifier::{BackendChoice, Pipeline, VerdictReport};
use scamlens_core::config::PipelineConfig;
use scamlens_core::corpus::{annotator_agreement, load_corpus, Corpus, Label};
use scamlens_core::evaluation::{
    classify_corpus, default_threshold_grid, default_weight_grid, evaluate, false_positive_report,
    labeled_scores, threshold_sweep, tune, CorpusVerdict, ExampleScores, ScoredResult,
};
use scamlens_core::ingest::parse_any;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_SCAM: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "scamlens", version, about = "Scam and phishing email detection")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// LLM backend: mock (deterministic, offline), remote (HTTP) or offline
    /// (heuristics only). Overrides the config file.
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendChoice>,
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Decision threshold; overrides the config file.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
}

fn parse_backend(s: &str) -> Result<BackendChoice, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct CorpusArg {
    /// Corpus file (JSONL).
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify one message (RFC 5322 file, plain text, or `-` for stdin).
    Scan { input: PathBuf },
    /// Classify every example in a corpus.
    Batch {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Write per-example results (JSONL).
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Evaluate the pipeline against corpus labels.
    Eval {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the false-positive review document (Markdown).
        #[arg(long)]
        fp_report: Option<PathBuf>,
    },
    /// Precision/recall/F1 across a grid of thresholds.
    Sweep {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Comma-separated ascending thresholds; defaults to 0.05..0.95.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Write the curve as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Cross-validated grid search over fusion weights and threshold.
    Tune {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Number of stratified folds.
        #[arg(long, default_value_t = scamlens_core::evaluation::DEFAULT_FOLDS)]
        k: usize,
        /// Fold assignment seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score cache (JSON); reused for ids already present, so remote
        /// backends are queried once per example.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Write the outcome as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the configuration with the tuned weights and threshold.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Corpus to classify at startup and serve for review.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Append-only label log (JSONL); replayed at startup.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Print the corpus with labels from a label log applied.
    ExportLabels {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        labels: PathBuf,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Run the CLI. Never exits the process.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let is_info = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let target: &mut dyn Write = if is_info { out } else { err };
            let _ = write!(target, "{}", e.render());
            return if is_info { EXIT_OK } else { EXIT_ERROR };
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_ERROR
        }
    }
}

fn load_config(global: &GlobalArgs) -> Result<PipelineConfig> {
    let mut config = match &global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(b) = global.backend {
        config.backend = b;
    }
    if let Some(t) = global.threshold {
        config.threshold = t;
    }
    config.validate()?;
    Ok(config)
}

fn load(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let config = load_config(&cli.global)?;
    let json = cli.global.json;
    match cli.command {
        Command::Scan { input } => scan(&input, config, json, out),
        Command::Batch { corpus, results } => {
            let corpus = load(&corpus.corpus)?;
            let scored = classify_corpus(&Pipeline::new(config)?, &corpus)?;
            if let Some(path) = results {
                let lines: String = scored
                    .iter()
                    .map(|r| serde_json::to_string(&BatchLine::from(r)).expect("line serializes") + "\n")
                    .collect();
                write_file(&path, &lines)?;
            }
            if json {
                let lines: Vec<BatchLine> = scored.iter().map(BatchLine::from).collect();
                writeln!(out, "{}", to_json(&lines))?;
            } else {
                writeln!(out, "{:<16} {:<10} {:>10}  flags", "id", "decision", "confidence")?;
                for r in &scored {
                    writeln!(
                        out,
                        "{:<16} {:<10} {:>10.4}  {}",
                        r.example_id,
                        r.verdict.decision,
                        r.verdict.confidence,
                        r.verdict.flags.len()
                    )?;
                }
            }
            Ok(EXIT_OK)
        }
        Command::Eval {
            corpus,
            report,
            fp_report,
        } => {
            let threshold = config.threshold;
            let corpus = load(&corpus.corpus)?;
            let scored = classify_corpus(&Pipeline::new(config)?, &corpus)?;
            let (scores, truth) = labeled_scores(&scored);
            let eval = evaluate(&scores, &truth, threshold)?;
            let fps = false_positive_report(&scored_results(&scored));
            if let Some(path) = report {
                write_file(&path, &to_json(&eval))?;
            }
            if let Some(path) = fp_report {
                write_file(&path, &fps.to_markdown())?;
            }
            if json {
                writeln!(out, "{}", to_json(&eval))?;
            } else {
                write!(out, "{}", eval.to_table())?;
                if let Some(agreement) = annotator_agreement(&corpus) {
                    writeln!(
                        out,
                        "kappa      {:.4} (mean over annotator pairs)",
                        agreement.mean_kappa
                    )?;
                }
                let disputed = corpus.disputed_ids();
                if !disputed.is_empty() {
                    writeln!(
                        out,
                        "excluded   {} disputed: {}",
                        disputed.len(),
                        disputed.join(", ")
                    )?;
                }
                writeln!(out, "false positives: {}", fps.entries.len())?;
            }
            Ok(EXIT_OK)
        }
        Command::Sweep { corpus, grid, report } => {
            let corpus = load(&corpus.corpus)?;
            let scored = classify_corpus(&Pipeline::new(config)?, &corpus)?;
            let (scores, truth) = labeled_scores(&scored);
            let grid = grid.unwrap_or_else(default_threshold_grid);
            let curve = threshold_sweep(&scores, &truth, &grid)?;
            if let Some(path) = report {
                write_file(&path, &to_json(&curve))?;
            }
            if json {
                writeln!(out, "{}", to_json(&curve))?;
            } else {
                write!(out, "{}", curve.to_table())?;
            }
            Ok(EXIT_OK)
        }
        Command::Tune {
            corpus,
            k,
            seed,
            cache,
            report,
            write_config,
        } => {
            let corpus = load(&corpus.corpus)?;
            let scores = tune_scores(&corpus, &config, cache.as_deref())?;
            let outcome = tune(
                &corpus,
                &scores,
                &default_weight_grid(),
                &default_threshold_grid(),
                k,
                seed,
            )?;
            if let Some(path) = report {
                write_file(&path, &to_json(&outcome))?;
            }
            if let Some(path) = write_config {
                let tuned = PipelineConfig {
                    fusion: outcome.weights,
                    threshold: outcome.threshold,
                    ..config
                };
                write_file(&path, &toml::to_string(&tuned)?)?;
            }
            if json {
                writeln!(out, "{}", to_json(&outcome))?;
            } else {
                writeln!(
                    out,
                    "weights    heuristic {:.2}, llm {:.2}",
                    outcome.weights.w_heuristic(),
                    outcome.weights.w_llm()
                )?;
                writeln!(out, "mean f1    {:.4} over {k} folds", outcome.mean_f1)?;
                write!(out, "{}", outcome.report.to_table())?;
            }
            Ok(EXIT_OK)
        }
        Command::Serve {
            host,
            port,
            corpus,
            labels,
        } => serve(config, &host, port, corpus.as_deref(), labels.as_deref()),
        Command::ExportLabels {
            corpus,
            labels,
            out: path,
        } => {
            let store = AnnotationStore::open(&labels, load(&corpus.corpus)?)?;
            let text = store.export_corpus().to_jsonl();
            match path {
                Some(p) => write_file(&p, &text)?,
                None => write!(out, "{text}")?,
            }
            Ok(EXIT_OK)
        }
    }
}

fn scan(input: &Path, config: PipelineConfig, json: bool, out: &mut dyn Write) -> Result<i32> {
    let raw = if input == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf).context("reading stdin")?;
        buf
    } else {
        std::fs::read(input).with_context(|| format!("reading {}", input.display()))?
    };
    if raw.iter().all(u8::is_ascii_whitespace) {
        bail!("input is empty");
    }
    let doc = parse_any(&raw);
    let verdict = Pipeline::new(config)?.classify(&doc)?;
    let report = verdict.report();
    if json {
        writeln!(out, "{}", to_json(&report))?;
    } else {
        write_verdict(&report, out)?;
    }
    Ok(match report.decision {
        Label::Scam => EXIT_SCAM,
        Label::Legitimate => EXIT_OK,
    })
}

fn write_verdict(report: &VerdictReport, out: &mut dyn Write) -> Result<()> {
    let relation = if report.decision == Label::Scam { ">" } else { "<=" };
    writeln!(
        out,
        "decision   {} (confidence {:.4} {relation} threshold {:.4})",
        report.decision, report.confidence, report.threshold
    )?;
    writeln!(out, "heuristic  {:.4}", report.heuristic_score)?;
    if let Some(llm) = &report.llm {
        writeln!(
            out,
            "llm        {} (confidence {:.4}{})",
            llm.verdict,
            llm.confidence,
            if llm.degraded { ", fallback parse" } else { "" }
        )?;
    }
    if report.degraded {
        writeln!(out, "note       degraded result")?;
    }
    if report.flags.is_empty() {
        writeln!(out, "flags      none")?;
    } else {
        writeln!(out, "flags")?;
        for f in &report.flags {
            writeln!(out, "  {:<24} {:?}", f.category.as_str(), f.evidence)?;
        }
    }
    Ok(())
}

#[derive(Debug, serde::Serialize)]
struct BatchLine<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<Label>,
    #[serde(flatten)]
    report: VerdictReport,
}

impl<'a> From<&'a CorpusVerdict> for BatchLine<'a> {
    fn from(r: &'a CorpusVerdict) -> Self {
        Self {
            id: &r.example_id,
            truth: r.truth,
            report: r.verdict.report(),
        }
    }
}

fn scored_results(scored: &[CorpusVerdict]) -> Vec<ScoredResult> {
    scored
        .iter()
        .filter_map(|r| {
            r.truth.map(|truth| ScoredResult {
                example_id: r.example_id.clone(),
                verdict: r.verdict.clone(),
                truth,
            })
        })
        .collect()
}

/// Per-example scores for tuning, read from and written back to `cache`.
fn tune_scores(
    corpus: &Corpus,
    config: &PipelineConfig,
    cache: Option<&Path>,
) -> Result<BTreeMap<String, ExampleScores>> {
    let mut scores: BTreeMap<String, ExampleScores> = match cache {
        Some(p) if p.exists() => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing score cache {}", p.display()))?
        }
        _ => BTreeMap::new(),
    };
    let missing: Vec<_> = corpus
        .labeled()
        .map(|(e, _)| e)
        .filter(|e| !scores.contains_key(&e.id))
        .cloned()
        .collect();
    if !missing.is_empty() {
        let pipeline = Pipeline::new(config.clone())?;
        let subset = Corpus {
            examples: missing,
            ..corpus.clone()
        };
        for r in classify_corpus(&pipeline, &subset)? {
            scores.insert(r.example_id.clone(), r.scores());
        }
        if let Some(p) = cache {
            write_file(p, &to_json(&scores))?;
        }
    }
    Ok(scores)
}

/// Build the service state: classify the corpus (if any) into the store.
pub fn service_state(
    config: PipelineConfig,
    corpus: Option<&Path>,
    labels: Option<&Path>,
) -> Result<service::AppState> {
    let corpus = match corpus {
        Some(p) => load(p)?,
        None => Corpus::default(),
    };
    let pipeline = Pipeline::new(config)?;
    let scored = classify_corpus(&pipeline, &corpus)?;
    let store = match labels {
        Some(p) => AnnotationStore::open(p, corpus)?,
        None => AnnotationStore::in_memory(corpus),
    };
    store.set_batch_results(
        scored
            .iter()
            .map(|r| BatchResult::from_verdict(r.example_id.clone(), &r.verdict, r.body.clone())),
    );
    Ok(service::AppState::new(pipeline, store))
}

fn serve(
    config: PipelineConfig,
    host: &str,
    port: u16,
    corpus: Option<&Path>,
    labels: Option<&Path>,
) -> Result<i32> {
    // Remote classification at startup uses the blocking HTTP client, so
    // the state is built before the runtime starts.
    let state = service_state(config, corpus, labels)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        log::info!("listening on {}", listener.local_addr()?);
        service::serve(listener, state, service::shutdown_signal())
            .await
            .context("serving")
    })?;
    Ok(EXIT_OK)
}
