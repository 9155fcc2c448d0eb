//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or exceeds its time budget.
//!
//! Run with `cargo test -p scamlens-cli --test acceptance`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use scamlens_core::annotation::{AnnotationStore, LabelState, NewLabel};
use scamlens_core::classifier::{decide, BackendChoice, FusionWeights, Pipeline, VerdictReport};
use scamlens_core::config::PipelineConfig;
use scamlens_core::corpus::{cohen_kappa, split_stratified, Corpus, Label, LabeledExample};
use scamlens_core::evaluation::{
    auc, confusion, default_threshold_grid, default_weight_grid, metrics, threshold_sweep, tune,
    ConfusionMatrix, EvalError, ExampleScores,
};
use scamlens_core::fixtures::{CLEAN_EML, PHISH_EML};
use scamlens_core::gateway::{
    parse_llm_response, BackendConfig, GatewayError, PromptTemplate, RecordingSleeper, RemoteClassifier,
    ScriptedTransport, TransportError, TransportResponse,
};
use scamlens_core::ingest::parse_email;
use scamlens_core::redflag::{default_brands, detect_flags, DetectorConfig, FlagCategory};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    check: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion {
            name: "fixture reproduction",
            budget: Some(Duration::from_secs(1)),
            check: fixture_reproduction,
        },
        Criterion {
            name: "clean control",
            budget: Some(Duration::from_secs(1)),
            check: clean_control,
        },
        Criterion {
            name: "metric oracle equivalence",
            budget: Some(Duration::from_secs(10)),
            check: metric_oracle,
        },
        Criterion {
            name: "fixed points",
            budget: None,
            check: fixed_points,
        },
        Criterion {
            name: "threshold monotonicity",
            budget: Some(Duration::from_secs(5)),
            check: threshold_monotonicity,
        },
        Criterion {
            name: "tuning oracle",
            budget: Some(Duration::from_secs(30)),
            check: tuning_oracle,
        },
        Criterion {
            name: "gateway robustness",
            budget: None,
            check: gateway_robustness,
        },
        Criterion {
            name: "service/CLI coherence",
            budget: None,
            check: service_cli_coherence,
        },
    ];

    // Keep assertion messages from interleaving with the report.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .map_or("panicked".into(), |m| format!("panicked: {m}")))
        });
        let elapsed = started.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:.0?}")),
            (o, _) => o,
        };
        let budget = c.budget.map_or(String::new(), |b| format!(" / {b:.0?}"));
        match outcome {
            Ok(detail) => println!("PASS  {:<26} {:>9.2?}{budget}  {detail}", c.name, elapsed),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {:<26} {:>9.2?}{budget}  {reason}", c.name, elapsed);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fixture_reproduction() -> Check {
    let doc = parse_email(PHISH_EML).map_err(|e| e.to_string())?;
    let flags =
        detect_flags(&doc, &default_brands(), &DetectorConfig::default()).map_err(|e| e.to_string())?;
    let categories: BTreeSet<FlagCategory> = flags.iter().map(|f| f.category).collect();
    ensure!(
        categories.len() >= 6,
        "only {} categories: {categories:?}",
        categories.len()
    );

    let expected = [
        (FlagCategory::SenderBrandMismatch, "inha.ac.kr"),
        (FlagCategory::SuspiciousLink, "wwwthefitdollar.com/gabbyr"),
        (FlagCategory::GrammarSpelling, "have suspend"),
        (FlagCategory::GrammarSpelling, "access.Some"),
        (FlagCategory::GenericSalutation, "Dear Customer"),
        (FlagCategory::GenericSignoff, "Online Email Team"),
    ];
    for (category, evidence) in expected {
        ensure!(
            flags
                .iter()
                .any(|f| f.category == category && f.evidence == evidence),
            "missing {category} {evidence:?}"
        );
    }

    let pipeline = Pipeline::new(PipelineConfig::default()).map_err(|e| e.to_string())?;
    let verdict = pipeline.classify(&doc).map_err(|e| e.to_string())?;
    ensure!(verdict.decision == Label::Scam, "decision {}", verdict.decision);
    Ok(format!(
        "{} categories, confidence {:.4}",
        categories.len(),
        verdict.confidence
    ))
}

fn clean_control() -> Check {
    let doc = parse_email(CLEAN_EML).map_err(|e| e.to_string())?;
    let flags =
        detect_flags(&doc, &default_brands(), &DetectorConfig::default()).map_err(|e| e.to_string())?;
    ensure!(flags.is_empty(), "flags raised: {flags:?}");
    let pipeline = Pipeline::new(PipelineConfig::default()).map_err(|e| e.to_string())?;
    let verdict = pipeline.classify(&doc).map_err(|e| e.to_string())?;
    ensure!(
        verdict.decision == Label::Legitimate,
        "decision {}",
        verdict.decision
    );
    Ok(format!("0 flags, confidence {:.4}", verdict.confidence))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Label> {
    let p: f64 = rng.gen();
    (0..n)
        .map(|_| {
            if rng.gen_bool(p) {
                Label::Scam
            } else {
                Label::Legitimate
            }
        })
        .collect()
}

/// Fraction `num / den` computed from its reduced form.
fn ratio(num: u64, den: u64) -> f64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let g = gcd(num, den).max(1);
    (num / g) as f64 / (den / g) as f64
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1ab1e);
    let mut auc_checked = 0;
    for instance in 0..1000 {
        let n = rng.gen_range(1..=200);
        let predicted = random_labels(&mut rng, n);
        let truth = random_labels(&mut rng, n);

        let count = |p: Label, t: Label| {
            predicted
                .iter()
                .zip(&truth)
                .filter(|&(&a, &b)| a == p && b == t)
                .count() as u64
        };
        let (tp, fp) = (
            count(Label::Scam, Label::Scam),
            count(Label::Scam, Label::Legitimate),
        );
        let (fn_, tn) = (
            count(Label::Legitimate, Label::Scam),
            count(Label::Legitimate, Label::Legitimate),
        );
        let cm = confusion(&predicted, &truth).map_err(|e| e.to_string())?;
        ensure!(
            cm == ConfusionMatrix { tp, fp, fn_, tn },
            "instance {instance}: {cm:?}"
        );

        let m = metrics(&cm).map_err(|e| e.to_string())?;
        let precision = if tp + fp == 0 { 0.0 } else { ratio(tp, tp + fp) };
        let recall = if tp + fn_ == 0 { 0.0 } else { ratio(tp, tp + fn_) };
        // Harmonic mean of tp/(tp+fp) and tp/(tp+fn) over the common
        // denominator (tp+fp)(tp+fn).
        let f1 = if tp == 0 {
            0.0
        } else {
            let num = 2 * tp * tp;
            let den = tp * (tp + fn_) + tp * (tp + fp);
            ratio(num, den)
        };
        let accuracy = ratio(tp + tn, n as u64);
        ensure!(
            (m.precision, m.recall, m.f1, m.accuracy) == (precision, recall, f1, accuracy),
            "instance {instance}: {m:?} vs ({precision}, {recall}, {f1}, {accuracy})"
        );

        // Coarse scores give plenty of ties.
        let levels = rng.gen_range(2..=50);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let pos: Vec<f64> = scores
            .iter()
            .zip(&truth)
            .filter(|(_, &t)| t == Label::Scam)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(&truth)
            .filter(|(_, &t)| t == Label::Legitimate)
            .map(|(&s, _)| s)
            .collect();
        match auc(&scores, &truth) {
            Ok(a) => {
                let mut wins = 0.0;
                for p in &pos {
                    for q in &neg {
                        wins += if p > q {
                            1.0
                        } else if p == q {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
                let brute = wins / (pos.len() * neg.len()) as f64;
                ensure!(
                    (a - brute).abs() < 1e-12,
                    "instance {instance}: auc {a} vs {brute}"
                );
                auc_checked += 1;
            }
            Err(EvalError::OneClassOnly) => {
                ensure!(
                    pos.is_empty() || neg.is_empty(),
                    "instance {instance}: spurious OneClassOnly"
                );
            }
            Err(e) => return Err(format!("instance {instance}: {e}")),
        }
    }
    Ok(format!("1000 instances, {auc_checked} with both classes"))
}

fn fixed_points() -> Check {
    let m = metrics(&ConfusionMatrix {
        tp: 2,
        fp: 1,
        fn_: 1,
        tn: 6,
    })
    .map_err(|e| e.to_string())?;
    for (name, v) in [("precision", m.precision), ("recall", m.recall), ("f1", m.f1)] {
        ensure!((v - 2.0 / 3.0).abs() < 1e-12, "{name} = {v}");
    }
    ensure!((m.accuracy - 0.8).abs() < 1e-12, "accuracy = {}", m.accuracy);

    use Label::{Legitimate as L, Scam as S};
    let a = auc(&[0.9, 0.4, 0.8, 0.3], &[S, S, L, L]).map_err(|e| e.to_string())?;
    ensure!((a - 0.75).abs() < 1e-12, "auc = {a}");

    let first = [S, S, S, S, L, L, L, L, S, L];
    let second = [S, S, S, S, L, L, L, L, L, S];
    let k = cohen_kappa(&first, &second).map_err(|e| e.to_string())?;
    ensure!((k - 0.6).abs() < 1e-12, "kappa = {k}");
    Ok("precision/recall/f1 2/3, accuracy 0.8, auc 0.75, kappa 0.6".into())
}

fn threshold_monotonicity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for set in 0..200 {
        let n = rng.gen_range(2..=200);
        let mut truth = random_labels(&mut rng, n);
        truth[0] = Label::Scam;
        truth[1] = Label::Legitimate;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let mut grid: Vec<f64> = (0..rng.gen_range(1..40)).map(|_| rng.gen()).collect();
        grid.extend(scores.iter().take(5));
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let curve = threshold_sweep(&scores, &truth, &grid).map_err(|e| format!("set {set}: {e}"))?;
        for w in curve.points.windows(2) {
            let (lo, hi) = (&w[0].matrix, &w[1].matrix);
            ensure!(
                hi.tp <= lo.tp && hi.fp <= lo.fp,
                "set {set}: counts rise between {} and {}",
                w[0].threshold,
                w[1].threshold
            );
        }
        for &s in &scores {
            ensure!(decide(s, s) == Label::Legitimate, "decide({s}, {s}) is scam");
        }
    }
    ensure!(decide(0.5, 0.5) == Label::Legitimate, "decide(0.5, 0.5) is scam");
    ensure!(
        decide(0.5000000000000001, 0.5) == Label::Scam,
        "next float above 0.5 is not scam"
    );
    Ok("200 sets, strict boundary".into())
}

fn separable_corpus() -> (Corpus, BTreeMap<String, ExampleScores>) {
    let mut examples = Vec::new();
    let mut scores = BTreeMap::new();
    for i in 0..40 {
        let label = if i % 2 == 0 {
            Label::Scam
        } else {
            Label::Legitimate
        };
        let id = format!("syn{i:02}");
        examples.push(LabeledExample::text(&id, "", &[("a", label), ("b", label)]));
        let h = if label == Label::Scam { 0.9 } else { 0.1 };
        // The LLM signal mirrors the heuristic, as with the mock backend.
        scores.insert(
            id,
            ExampleScores {
                heuristic: h,
                llm: Some(h),
            },
        );
    }
    (Corpus::new(examples, "synthetic separable").unwrap(), scores)
}

/// Straightforward grid search used to cross-check `tune`.
fn oracle_selection(
    corpus: &Corpus,
    scores: &BTreeMap<String, ExampleScores>,
    weights: &[FusionWeights],
    thresholds: &[f64],
    k: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let folds = split_stratified(corpus, k, seed).unwrap();
    let truth: BTreeMap<&str, Label> = corpus.labeled().map(|(e, l)| (e.id.as_str(), l)).collect();
    let mut candidates = Vec::new();
    for w in weights {
        for &t in thresholds {
            let mut f1_sum = 0.0;
            let mut precision_sum = 0.0;
            for fold in &folds.folds {
                let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
                for id in fold {
                    let s = scores[id];
                    let fused = w.w_heuristic() * s.heuristic + w.w_llm() * s.llm.unwrap();
                    let scam = fused > t;
                    match (scam, truth[id.as_str()]) {
                        (true, Label::Scam) => tp += 1,
                        (true, Label::Legitimate) => fp += 1,
                        (false, Label::Scam) => fn_ += 1,
                        _ => {}
                    }
                }
                f1_sum += if tp == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
                };
                precision_sum += if tp + fp == 0 {
                    0.0
                } else {
                    tp as f64 / (tp + fp) as f64
                };
            }
            candidates.push((f1_sum / k as f64, precision_sum / k as f64, t, w.w_llm()));
        }
    }
    // Highest F1, then precision; then lowest threshold, then LLM weight.
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.total_cmp(&b.2))
            .then(a.3.total_cmp(&b.3))
    });
    let best = candidates[0];
    (best.0, best.2, best.3)
}

fn tuning_oracle() -> Check {
    let (corpus, scores) = separable_corpus();
    let (weights, thresholds) = (default_weight_grid(), default_threshold_grid());
    let (k, seed) = (5, 2024);
    let first = tune(&corpus, &scores, &weights, &thresholds, k, seed).map_err(|e| e.to_string())?;
    let second = tune(&corpus, &scores, &weights, &thresholds, k, seed).map_err(|e| e.to_string())?;
    ensure!(first == second, "two runs differ");
    ensure!(first.mean_f1 == 1.0, "mean F1 {}", first.mean_f1);
    ensure!(first.report.f1 == 1.0, "pooled F1 {}", first.report.f1);

    let (oracle_f1, oracle_t, oracle_w) = oracle_selection(&corpus, &scores, &weights, &thresholds, k, seed);
    ensure!(
        (first.mean_f1, first.threshold, first.weights.w_llm()) == (oracle_f1, oracle_t, oracle_w),
        "tune picked (f1 {}, t {}, w_llm {}), oracle (f1 {oracle_f1}, t {oracle_t}, w_llm {oracle_w})",
        first.mean_f1,
        first.threshold,
        first.weights.w_llm()
    );
    ensure!(
        (0.1..0.9).contains(&first.threshold),
        "threshold {} outside the separating range",
        first.threshold
    );
    Ok(format!(
        "F1 1.0 at threshold {}, w_llm {}",
        first.threshold,
        first.weights.w_llm()
    ))
}

fn gateway_robustness() -> Check {
    const STRUCTURED: &str = r#"{"verdict":"scam","confidence":0.95,"red_flags":[{"category":"suspicious_link","evidence":"wwwthefitdollar.com"}]}"#;
    let doc = parse_email(PHISH_EML).map_err(|e| e.to_string())?;
    let client = |max_retries: u32, script: Vec<Result<TransportResponse, TransportError>>| {
        let transport = Arc::new(ScriptedTransport::new(script));
        let backend = BackendConfig {
            endpoint_url: "http://backend.invalid/v1/chat/completions".into(),
            max_retries,
            ..BackendConfig::default()
        };
        let c = RemoteClassifier::new(backend, PromptTemplate::default(), transport.clone())
            .unwrap()
            .with_sleeper(Arc::new(RecordingSleeper::default()))
            .with_jitter_seed(1);
        (c, transport)
    };

    let plain = parse_llm_response(STRUCTURED).map_err(|e| e.to_string())?;
    ensure!(
        plain.verdict == Label::Scam
            && plain.confidence == 0.95
            && plain.red_flags.len() == 1
            && !plain.degraded,
        "structured parse: {plain:?}"
    );
    let fenced = parse_llm_response(&format!("Sure.\n```json\n{STRUCTURED}\n```\nDone."))
        .map_err(|e| e.to_string())?;
    ensure!(
        (
            fenced.verdict,
            fenced.confidence,
            &fenced.red_flags,
            fenced.degraded
        ) == (plain.verdict, plain.confidence, &plain.red_flags, false),
        "fenced parse differs"
    );
    ensure!(
        matches!(
            parse_llm_response("I believe this is fine."),
            Err(GatewayError::UnparseableResponse(_))
        ),
        "prose parsed as a verdict"
    );

    let (c, t) = client(
        0,
        vec![Ok(TransportResponse::chat("This looks like phishing to me."))],
    );
    let v = c.classify(&doc).map_err(|e| e.to_string())?;
    ensure!(
        v.degraded && v.verdict == Label::Scam && v.confidence == 0.5,
        "fallback: {v:?}"
    );
    ensure!(t.calls() == 1, "fallback made {} requests", t.calls());

    let (c, t) = client(
        3,
        vec![
            Ok(TransportResponse::status(429)),
            Ok(TransportResponse::chat(STRUCTURED)),
        ],
    );
    c.classify(&doc).map_err(|e| e.to_string())?;
    ensure!(t.calls() == 2, "429 then success took {} attempts", t.calls());

    let (c, t) = client(
        5,
        vec![
            Ok(TransportResponse::status(401)),
            Ok(TransportResponse::chat(STRUCTURED)),
        ],
    );
    ensure!(
        matches!(c.classify(&doc), Err(GatewayError::AuthFailure { status: 401 })),
        "401 not AuthFailure"
    );
    ensure!(t.calls() == 1, "AuthFailure retried ({} attempts)", t.calls());

    let (c, t) = client(2, vec![Err(TransportError::Timeout)]);
    ensure!(
        matches!(
            c.classify(&doc),
            Err(GatewayError::BackendUnavailable { attempts: 3, .. })
        ),
        "exhausted retries not BackendUnavailable"
    );
    ensure!(t.calls() == 3, "exhausted retries made {} attempts", t.calls());
    Ok("6 scripted scenarios".into())
}

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn flag_set(report: &VerdictReport) -> BTreeSet<(FlagCategory, String)> {
    report
        .flags
        .iter()
        .map(|f| (f.category, f.evidence.clone()))
        .collect()
}

fn service_cli_coherence() -> Check {
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    let out = std::process::Command::new(env!("CARGO_BIN_EXE_scamlens"))
        .args([
            "scan",
            fixture_path("rackspace_phish.eml").to_str().unwrap(),
            "--backend",
            "mock",
            "--json",
        ])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.code() == Some(2),
        "scan exit code {:?}",
        out.status.code()
    );
    let cli: VerdictReport = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;

    let config = PipelineConfig {
        backend: BackendChoice::Mock,
        ..PipelineConfig::default()
    };
    let state = scamlens_cli::service_state(config, None, None).map_err(|e| e.to_string())?;
    let body = serde_json::json!({"raw_email": String::from_utf8_lossy(PHISH_EML)}).to_string();
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let (status, bytes) = rt.block_on(async {
        let resp = scamlens_cli::service::router(state)
            .oneshot(
                Request::post("/classify")
                    .header("content-type", "application/json")
                    .body(Body::from(body))
                    .unwrap(),
            )
            .await
            .unwrap();
        (
            resp.status(),
            resp.into_body().collect().await.unwrap().to_bytes(),
        )
    });
    ensure!(status == 200, "POST /classify returned {status}");
    let service: VerdictReport = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    let raw: Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    ensure!(
        raw.get("decision").is_some() && raw.get("flags").is_some(),
        "response shape: {raw}"
    );

    ensure!(cli.decision == service.decision, "decisions differ");
    ensure!(
        (cli.confidence - service.confidence).abs() < 1e-12,
        "confidence {} vs {}",
        cli.confidence,
        service.confidence
    );
    ensure!(flag_set(&cli) == flag_set(&service), "flag sets differ");

    // 100 random label events, then rebuild from the log.
    let examples: Vec<LabeledExample> = (0..12)
        .map(|i| LabeledExample::text(format!("ex{i}"), "body", &[("seed", Label::Legitimate)]))
        .collect();
    let corpus = Corpus::new(examples, "replay").map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = dir.path().join("labels.jsonl");
    let store = AnnotationStore::open(&log, corpus.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        store
            .record_label(NewLabel {
                example_id: format!("ex{}", rng.gen_range(0..12)),
                annotator_id: format!("ann{}", rng.gen_range(0..4)),
                label: if rng.gen() { Label::Scam } else { Label::Legitimate },
                note: rng.gen_bool(0.3).then(|| "checked".to_string()),
            })
            .map_err(|e| e.to_string())?;
    }
    let live = store.state();
    ensure!(live.last_seq == 100, "last seq {}", live.last_seq);
    ensure!(
        LabelState::replay(&store.events()).as_ref() == Some(&live),
        "in-memory replay differs"
    );
    let reopened = AnnotationStore::open(&log, corpus).map_err(|e| e.to_string())?;
    ensure!(reopened.state() == live, "log replay differs");
    ensure!(
        reopened.export_corpus() == store.export_corpus(),
        "exported labels differ"
    );
    Ok(format!(
        "{} flags agree, confidence {:.4}; 100-event replay matches",
        cli.flags.len(),
        cli.confidence
    ))
}
