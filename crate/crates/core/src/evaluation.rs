//! Confusion matrices, precision/recall/F1/accuracy, ROC AUC, threshold
//! sweeps, cross-validated grid tuning and false-positive reports.
//!
//! Scam is the positive class throughout. Metrics with a zero denominator
//! are reported as 0 and tagged with a [`DegenerateMarker`] instead of NaN.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{decide, fuse_scores, ClassifyError, FusionWeights, Pipeline, Verdict};
use crate::corpus::{split_stratified, Corpus, CorpusError, Label};
use crate::redflag::RedFlag;

/// Tolerance for treating two mean scores as tied during tuning.
const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no examples")]
    EmptyInput,
    #[error("both classes must be present")]
    OneClassOnly,
    #[error("score {0} is not a finite number")]
    InvalidScore(f64),
    #[error("threshold grid must be non-empty and strictly ascending")]
    BadGrid,
    #[error("need at least {needed} non-disputed examples, found {available}")]
    TooFewExamples { needed: usize, available: usize },
    #[error("no score for example {0:?}")]
    MissingScore(String),
}

impl From<CorpusError> for EvalError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::TooFewExamples { needed, available } => {
                EvalError::TooFewExamples { needed, available }
            }
            other => EvalError::MissingScore(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Scam, Label::Scam) => self.tp += 1,
            (Label::Scam, Label::Legitimate) => self.fp += 1,
            (Label::Legitimate, Label::Scam) => self.fn_ += 1,
            (Label::Legitimate, Label::Legitimate) => self.tn += 1,
        }
    }

    pub fn merged(self, other: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

pub fn confusion(predicted: &[Label], truth: &[Label]) -> Result<ConfusionMatrix, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        cm.record(p, t);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateMarker {
    NoPredictedPositives,
    NoActualPositives,
    /// AUC undefined: only one class present.
    OneClassOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub degenerate_flags: BTreeSet<DegenerateMarker>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyInput);
    }
    let mut degenerate_flags = BTreeSet::new();
    let predicted_pos = cm.tp + cm.fp;
    let actual_pos = cm.tp + cm.fn_;
    let precision = if predicted_pos == 0 {
        degenerate_flags.insert(DegenerateMarker::NoPredictedPositives);
        0.0
    } else {
        cm.tp as f64 / predicted_pos as f64
    };
    let recall = if actual_pos == 0 {
        degenerate_flags.insert(DegenerateMarker::NoActualPositives);
        0.0
    } else {
        cm.tp as f64 / actual_pos as f64
    };
    // Harmonic mean of precision and recall, in count form.
    let f1 = if cm.tp == 0 {
        0.0
    } else {
        (2 * cm.tp) as f64 / (2 * cm.tp + cm.fp + cm.fn_) as f64
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        degenerate_flags,
    })
}

fn check_scores(scores: &[f64], truth: &[Label]) -> Result<(), EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::LengthMismatch(scores.len(), truth.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::InvalidScore(bad));
    }
    Ok(())
}

fn both_classes(truth: &[Label]) -> bool {
    truth.contains(&Label::Scam) && truth.contains(&Label::Legitimate)
}

/// ROC AUC as the Mann-Whitney statistic: the fraction of (scam, legitimate)
/// pairs ranked correctly, ties counting one half. Computed from midranks.
pub fn auc(scores: &[f64], truth: &[Label]) -> Result<f64, EvalError> {
    check_scores(scores, truth)?;
    if !both_classes(truth) {
        return Err(EvalError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j].iter().filter(|&&k| truth[k] == Label::Scam).count();
        positive_rank_sum += midrank * positives as f64;
        i = j + 1;
    }
    let n_pos = truth.iter().filter(|&&t| t == Label::Scam).count() as f64;
    let n_neg = truth.len() as f64 - n_pos;
    Ok((positive_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matrix: ConfusionMatrix,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub threshold: f64,
    pub degenerate_flags: BTreeSet<DegenerateMarker>,
}

impl EvalReport {
    pub fn from_parts(matrix: ConfusionMatrix, auc: Option<f64>, threshold: f64) -> Result<Self, EvalError> {
        let m = metrics(&matrix)?;
        let mut degenerate_flags = m.degenerate_flags;
        if auc.is_none() {
            degenerate_flags.insert(DegenerateMarker::OneClassOnly);
        }
        Ok(Self {
            matrix,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            accuracy: m.accuracy,
            auc,
            threshold,
            degenerate_flags,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let cm = &self.matrix;
        let _ = writeln!(out, "threshold  {:.4}", self.threshold);
        let _ = writeln!(out, "examples   {}", cm.total());
        let _ = writeln!(out);
        let _ = writeln!(out, "                 truth scam  truth legit");
        let _ = writeln!(out, "predicted scam   {:>10}  {:>11}", cm.tp, cm.fp);
        let _ = writeln!(out, "predicted legit  {:>10}  {:>11}", cm.fn_, cm.tn);
        let _ = writeln!(out);
        let _ = writeln!(out, "precision  {:.4}", self.precision);
        let _ = writeln!(out, "recall     {:.4}", self.recall);
        let _ = writeln!(out, "f1         {:.4}", self.f1);
        let _ = writeln!(out, "accuracy   {:.4}", self.accuracy);
        match self.auc {
            Some(a) => {
                let _ = writeln!(out, "auc        {a:.4}");
            }
            None => {
                let _ = writeln!(out, "auc        n/a");
            }
        }
        if !self.degenerate_flags.is_empty() {
            let flags: Vec<String> = self.degenerate_flags.iter().map(|f| format!("{f:?}")).collect();
            let _ = writeln!(out, "notes      {}", flags.join(", "));
        }
        out
    }
}

/// Confusion, metrics and AUC for scores at a threshold. AUC is omitted
/// (with a marker) when only one class is present.
pub fn evaluate(scores: &[f64], truth: &[Label], threshold: f64) -> Result<EvalReport, EvalError> {
    check_scores(scores, truth)?;
    let predicted: Vec<Label> = scores.iter().map(|&s| decide(s, threshold)).collect();
    let matrix = confusion(&predicted, truth)?;
    let auc = both_classes(truth).then(|| auc(scores, truth)).transpose()?;
    EvalReport::from_parts(matrix, auc, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub matrix: ConfusionMatrix,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn best_f1(&self) -> Option<&SweepPoint> {
        self.points.iter().fold(None, |best, p| match best {
            Some(b) if b.f1 >= p.f1 => Some(b),
            _ => Some(p),
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("threshold     tp     fp     fn     tn  precision  recall      f1\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{:>9.4} {:>6} {:>6} {:>6} {:>6}  {:>9.4}  {:>6.4}  {:>6.4}",
                p.threshold, p.matrix.tp, p.matrix.fp, p.matrix.fn_, p.matrix.tn, p.precision, p.recall, p.f1
            );
        }
        out
    }
}

pub fn threshold_sweep(scores: &[f64], truth: &[Label], grid: &[f64]) -> Result<SweepCurve, EvalError> {
    check_scores(scores, truth)?;
    if !both_classes(truth) {
        return Err(EvalError::OneClassOnly);
    }
    if grid.is_empty()
        || grid
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less))
        || grid.iter().any(|t| !t.is_finite())
    {
        return Err(EvalError::BadGrid);
    }
    let points = grid
        .iter()
        .map(|&threshold| {
            let predicted: Vec<Label> = scores.iter().map(|&s| decide(s, threshold)).collect();
            let matrix = confusion(&predicted, truth)?;
            let m = metrics(&matrix)?;
            Ok(SweepPoint {
                threshold,
                matrix,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(SweepCurve { points })
}

/// 0.05, 0.10, ..., 0.95.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// LLM share 0.0, 0.1, ..., 1.0.
pub fn default_weight_grid() -> Vec<FusionWeights> {
    (0..=10)
        .map(|i| FusionWeights::with_llm_share(i as f64 / 10.0).expect("share in [0, 1]"))
        .collect()
}

pub const DEFAULT_FOLDS: usize = 5;

/// Scores for one example: the heuristic score and, when available, the
/// LLM confidence (mock or cached remote).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub heuristic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub weights: FusionWeights,
    pub threshold: f64,
    /// Pooled over all folds at the selected configuration.
    pub report: EvalReport,
    pub mean_f1: f64,
    pub mean_precision: f64,
    pub fold_f1: Vec<f64>,
    pub excluded: Vec<String>,
}

struct Candidate {
    weights: FusionWeights,
    threshold: f64,
    mean_f1: f64,
    mean_precision: f64,
    fold_f1: Vec<f64>,
}

impl Candidate {
    /// Higher mean F1, then higher mean precision, then lower threshold,
    /// then lower LLM weight.
    fn beats(&self, other: &Candidate) -> bool {
        if (self.mean_f1 - other.mean_f1).abs() > TIE_EPSILON {
            return self.mean_f1 > other.mean_f1;
        }
        if (self.mean_precision - other.mean_precision).abs() > TIE_EPSILON {
            return self.mean_precision > other.mean_precision;
        }
        if self.threshold != other.threshold {
            return self.threshold < other.threshold;
        }
        self.weights.w_llm() < other.weights.w_llm()
    }
}

/// Exhaustive grid search with stratified k-fold evaluation. Each grid point
/// is scored by its mean F1 over the folds.
pub fn tune(
    corpus: &Corpus,
    scores: &BTreeMap<String, ExampleScores>,
    weight_grid: &[FusionWeights],
    threshold_grid: &[f64],
    k: usize,
    seed: u64,
) -> Result<TuneOutcome, EvalError> {
    if weight_grid.is_empty()
        || threshold_grid.is_empty()
        || threshold_grid
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less))
    {
        return Err(EvalError::BadGrid);
    }
    let folds = split_stratified(corpus, k, seed)?;
    let truth: BTreeMap<&str, Label> = corpus.labeled().map(|(e, l)| (e.id.as_str(), l)).collect();
    if !both_classes(&truth.values().copied().collect::<Vec<_>>()) {
        return Err(EvalError::OneClassOnly);
    }
    let fold_rows: Vec<Vec<(ExampleScores, Label)>> = folds
        .folds
        .iter()
        .map(|fold| {
            fold.iter()
                .map(|id| {
                    let s = scores
                        .get(id)
                        .ok_or_else(|| EvalError::MissingScore(id.clone()))?;
                    if !s.heuristic.is_finite() {
                        return Err(EvalError::InvalidScore(s.heuristic));
                    }
                    if let Some(l) = s.llm.filter(|l| !l.is_finite()) {
                        return Err(EvalError::InvalidScore(l));
                    }
                    Ok((*s, truth[id.as_str()]))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let fold_matrix = |rows: &[(ExampleScores, Label)], w: FusionWeights, t: f64| {
        let mut cm = ConfusionMatrix::default();
        for (s, label) in rows {
            cm.record(decide(fuse_scores(s.heuristic, s.llm, w), t), *label);
        }
        cm
    };

    let mut best: Option<Candidate> = None;
    for &weights in weight_grid {
        for &threshold in threshold_grid {
            let mut f1s = Vec::with_capacity(k);
            let mut precisions = Vec::with_capacity(k);
            for rows in &fold_rows {
                let m = metrics(&fold_matrix(rows, weights, threshold))?;
                f1s.push(m.f1);
                precisions.push(m.precision);
            }
            let candidate = Candidate {
                weights,
                threshold,
                mean_f1: f1s.iter().sum::<f64>() / k as f64,
                mean_precision: precisions.iter().sum::<f64>() / k as f64,
                fold_f1: f1s,
            };
            if best.as_ref().is_none_or(|b| candidate.beats(b)) {
                best = Some(candidate);
            }
        }
    }
    let best = best.expect("grids are non-empty");

    let pooled = fold_rows
        .iter()
        .map(|rows| fold_matrix(rows, best.weights, best.threshold))
        .fold(ConfusionMatrix::default(), ConfusionMatrix::merged);
    let (all_scores, all_truth): (Vec<f64>, Vec<Label>) = fold_rows
        .iter()
        .flatten()
        .map(|(s, l)| (fuse_scores(s.heuristic, s.llm, best.weights), *l))
        .unzip();
    let report = EvalReport::from_parts(pooled, Some(auc(&all_scores, &all_truth)?), best.threshold)?;

    Ok(TuneOutcome {
        weights: best.weights,
        threshold: best.threshold,
        report,
        mean_f1: best.mean_f1,
        mean_precision: best.mean_precision,
        fold_f1: best.fold_f1,
        excluded: folds.excluded,
    })
}

/// A pipeline verdict for one corpus example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusVerdict {
    pub example_id: String,
    /// Consensus label; `None` for disputed examples.
    pub truth: Option<Label>,
    pub verdict: Verdict,
    /// Normalized body the flag offsets refer to.
    pub body: String,
}

impl CorpusVerdict {
    pub fn scores(&self) -> ExampleScores {
        ExampleScores {
            heuristic: self.verdict.heuristic_score,
            llm: self.verdict.llm.as_ref().map(|v| v.confidence),
        }
    }
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("example {id}: {source}")]
    Classify {
        id: String,
        #[source]
        source: ClassifyError,
    },
}

/// Run the pipeline over every example, in corpus order.
pub fn classify_corpus(pipeline: &Pipeline, corpus: &Corpus) -> Result<Vec<CorpusVerdict>, BatchError> {
    corpus
        .examples
        .iter()
        .map(|example| {
            let doc = corpus.document(example)?;
            let verdict = pipeline.classify(&doc).map_err(|source| BatchError::Classify {
                id: example.id.clone(),
                source,
            })?;
            Ok(CorpusVerdict {
                example_id: example.id.clone(),
                truth: example.consensus.label(),
                verdict,
                body: doc.body,
            })
        })
        .collect()
}

/// Scores and truth for the examples with a decided consensus.
pub fn labeled_scores(results: &[CorpusVerdict]) -> (Vec<f64>, Vec<Label>) {
    results
        .iter()
        .filter_map(|r| r.truth.map(|t| (r.verdict.confidence, t)))
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResult {
    pub example_id: String,
    pub verdict: Verdict,
    pub truth: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsePositiveEntry {
    pub example_id: String,
    pub confidence: f64,
    pub flags: Vec<RedFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_summary: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FalsePositiveReport {
    pub entries: Vec<FalsePositiveEntry>,
}

impl FalsePositiveReport {
    /// Reviewer-readable rendering.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# False positives\n\n");
        if self.entries.is_empty() {
            out.push_str("None.\n");
            return out;
        }
        for e in &self.entries {
            let _ = writeln!(out, "## {} (confidence {:.4})\n", e.example_id, e.confidence);
            if let Some(llm) = &e.llm_summary {
                let _ = writeln!(out, "LLM: {llm}\n");
            }
            for f in &e.flags {
                let _ = writeln!(out, "- `{}`: {:?}", f.category, f.evidence);
            }
            out.push('\n');
        }
        out
    }
}

/// Predicted scam but labeled legitimate, most confident first.
pub fn false_positive_report(results: &[ScoredResult]) -> FalsePositiveReport {
    let mut entries: Vec<FalsePositiveEntry> = results
        .iter()
        .filter(|r| r.verdict.decision == Label::Scam && r.truth == Label::Legitimate)
        .map(|r| FalsePositiveEntry {
            example_id: r.example_id.clone(),
            confidence: r.verdict.confidence,
            flags: r.verdict.flags.clone(),
            llm_summary: r.verdict.llm.as_ref().map(|v| v.summary()),
        })
        .collect();
    entries.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.example_id.cmp(&b.example_id))
    });
    FalsePositiveReport { entries }
}
