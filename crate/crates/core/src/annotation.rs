//! Label store for the human review loop.
//!
//! Labels arrive as events with a store-assigned sequence number and are
//! appended, one JSON object per line, to a log file. The effective label for
//! an (example, annotator) pair is the latest event for it, falling back to
//! the corpus annotation. Reopening a store replays the log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{decide, Verdict};
use crate::corpus::{aggregate_labels, AnnotatorLabel, Consensus, Corpus, Label, LabeledExample, Payload};
use crate::evaluation::{evaluate, EvalError, EvalReport};
use crate::redflag::RedFlag;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewLabel {
    pub example_id: String,
    pub annotator_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub seq: u64,
    pub example_id: String,
    pub annotator_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown example {0:?}")]
    UnknownExample(String),
    #[error("annotator_id must not be empty")]
    EmptyAnnotator,
    #[error("could not write label log {path}: {source}")]
    StoreWriteFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("label log {path} line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Labels derived from events alone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LabelState {
    pub last_seq: u64,
    /// example_id -> annotator_id -> latest event.
    pub latest: BTreeMap<String, BTreeMap<String, AnnotationEvent>>,
}

impl LabelState {
    pub fn apply(&mut self, event: AnnotationEvent) {
        self.last_seq = self.last_seq.max(event.seq);
        self.latest
            .entry(event.example_id.clone())
            .or_default()
            .insert(event.annotator_id.clone(), event);
    }

    /// Rebuild state from an event sequence; `None` if seq is not strictly
    /// increasing.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a AnnotationEvent>) -> Option<Self> {
        let mut state = Self::default();
        for e in events {
            if e.seq <= state.last_seq {
                return None;
            }
            state.apply(e.clone());
        }
        Some(state)
    }
}

/// A scored item from a batch run, as held by the store for review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub example_id: String,
    pub confidence: f64,
    pub flags: Vec<RedFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_summary: Option<String>,
    /// Normalized body text, so flag offsets can be highlighted.
    pub body: String,
}

impl BatchResult {
    pub fn from_verdict(example_id: impl Into<String>, verdict: &Verdict, body: impl Into<String>) -> Self {
        Self {
            example_id: example_id.into(),
            confidence: verdict.confidence,
            flags: verdict.flags.clone(),
            llm_summary: verdict.llm.as_ref().map(|v| v.summary()),
            body: body.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewReason {
    PredictedScam,
    Disputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub example_id: String,
    pub reason: ReviewReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub flags: Vec<RedFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    pub labels: Vec<AnnotatorLabel>,
    pub consensus: Consensus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveLabels {
    pub example_id: String,
    pub labels: Vec<AnnotatorLabel>,
    pub consensus: Consensus,
}

struct Inner {
    events: Vec<AnnotationEvent>,
    state: LabelState,
    batch: BTreeMap<String, BatchResult>,
    log: Option<(PathBuf, File)>,
}

/// Thread-safe label store. Writers are serialized by the write lock, which
/// also covers the log append, so seq order matches file order.
pub struct AnnotationStore {
    corpus: Corpus,
    inner: RwLock<Inner>,
}

impl AnnotationStore {
    /// A store with no log file.
    pub fn in_memory(corpus: Corpus) -> Self {
        Self {
            corpus,
            inner: RwLock::new(Inner {
                events: Vec::new(),
                state: LabelState::default(),
                batch: BTreeMap::new(),
                log: None,
            }),
        }
    }

    /// Open (or create) a log file, replaying any events already in it.
    pub fn open(path: &Path, corpus: Corpus) -> Result<Self, StoreError> {
        let events = read_log(path)?;
        let state = LabelState::replay(&events).ok_or_else(|| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: 0,
            reason: "seq is not strictly increasing".into(),
        })?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| StoreError::StoreWriteFailure {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self {
            corpus,
            inner: RwLock::new(Inner {
                events,
                state,
                batch: BTreeMap::new(),
                log: Some((path.to_path_buf(), file)),
            }),
        })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn record_label(&self, label: NewLabel) -> Result<AnnotationEvent, StoreError> {
        self.record_label_at(label, Utc::now())
    }

    pub fn record_label_at(
        &self,
        label: NewLabel,
        timestamp: DateTime<Utc>,
    ) -> Result<AnnotationEvent, StoreError> {
        if label.annotator_id.trim().is_empty() {
            return Err(StoreError::EmptyAnnotator);
        }
        let mut inner = self.write();
        if self.corpus.get(&label.example_id).is_none() && !inner.batch.contains_key(&label.example_id) {
            return Err(StoreError::UnknownExample(label.example_id));
        }
        let event = AnnotationEvent {
            seq: inner.state.last_seq + 1,
            example_id: label.example_id,
            annotator_id: label.annotator_id,
            label: label.label,
            note: label.note,
            timestamp,
        };
        if let Some((path, file)) = inner.log.as_mut() {
            let mut line = serde_json::to_string(&event).expect("event serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| StoreError::StoreWriteFailure {
                    path: path.clone(),
                    source,
                })?;
        }
        inner.events.push(event.clone());
        inner.state.apply(event.clone());
        Ok(event)
    }

    pub fn events(&self) -> Vec<AnnotationEvent> {
        self.read().events.clone()
    }

    pub fn state(&self) -> LabelState {
        self.read().state.clone()
    }

    fn merged(&self, inner: &Inner, example_id: &str) -> Vec<AnnotatorLabel> {
        let mut by_annotator: BTreeMap<&str, Label> = BTreeMap::new();
        if let Some(example) = self.corpus.get(example_id) {
            for a in &example.annotations {
                by_annotator.insert(&a.annotator_id, a.label);
            }
        }
        if let Some(latest) = inner.state.latest.get(example_id) {
            for (annotator, event) in latest {
                by_annotator.insert(annotator, event.label);
            }
        }
        by_annotator
            .into_iter()
            .map(|(annotator_id, label)| AnnotatorLabel {
                annotator_id: annotator_id.to_string(),
                label,
            })
            .collect()
    }

    /// Corpus annotations overlaid with recorded labels; `None` for ids the
    /// store does not know.
    pub fn effective_labels(&self, example_id: &str) -> Option<EffectiveLabels> {
        let inner = self.read();
        if self.corpus.get(example_id).is_none() && !inner.batch.contains_key(example_id) {
            return None;
        }
        let labels = self.merged(&inner, example_id);
        Some(EffectiveLabels {
            example_id: example_id.to_string(),
            consensus: aggregate_labels(&labels),
            labels,
        })
    }

    /// The corpus with effective labels applied. Batch-only items that have
    /// labels are appended as text records.
    pub fn export_corpus(&self) -> Corpus {
        let inner = self.read();
        let mut examples: Vec<LabeledExample> = self
            .corpus
            .examples
            .iter()
            .map(|e| {
                LabeledExample::new(
                    e.id.clone(),
                    e.payload.clone(),
                    e.scam_type,
                    self.merged(&inner, &e.id),
                )
            })
            .collect();
        for (id, result) in &inner.batch {
            if self.corpus.get(id).is_none() && inner.state.latest.contains_key(id) {
                examples.push(LabeledExample::new(
                    id.clone(),
                    Payload::Text(result.body.clone()),
                    None,
                    self.merged(&inner, id),
                ));
            }
        }
        Corpus {
            examples,
            source_manifest: self.corpus.source_manifest.clone(),
            base_dir: self.corpus.base_dir.clone(),
        }
    }

    /// Replace the stored batch results.
    pub fn set_batch_results(&self, results: impl IntoIterator<Item = BatchResult>) {
        let mut inner = self.write();
        inner.batch = results.into_iter().map(|r| (r.example_id.clone(), r)).collect();
    }

    pub fn batch_len(&self) -> usize {
        self.read().batch.len()
    }

    /// Predicted-scam items at `threshold`, most confident first, then
    /// labeled items whose annotators are split, in corpus order.
    pub fn review_queue(&self, threshold: f64) -> Vec<ReviewItem> {
        let inner = self.read();
        let mut scams: Vec<&BatchResult> = inner
            .batch
            .values()
            .filter(|r| decide(r.confidence, threshold) == Label::Scam)
            .collect();
        scams.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then_with(|| a.example_id.cmp(&b.example_id))
        });
        let mut items: Vec<ReviewItem> = scams
            .into_iter()
            .map(|r| {
                let labels = self.merged(&inner, &r.example_id);
                ReviewItem {
                    example_id: r.example_id.clone(),
                    reason: ReviewReason::PredictedScam,
                    confidence: Some(r.confidence),
                    flags: r.flags.clone(),
                    llm_summary: r.llm_summary.clone(),
                    body: Some(r.body.clone()),
                    consensus: aggregate_labels(&labels),
                    labels,
                }
            })
            .collect();

        let mut ids: Vec<&str> = self.corpus.examples.iter().map(|e| e.id.as_str()).collect();
        ids.extend(
            inner
                .batch
                .keys()
                .map(String::as_str)
                .filter(|id| self.corpus.get(id).is_none()),
        );
        for id in ids {
            if items.iter().any(|i| i.example_id == id) {
                continue;
            }
            let labels = self.merged(&inner, id);
            // Unlabeled items are not disputes.
            if labels.is_empty() || aggregate_labels(&labels) != Consensus::Disputed {
                continue;
            }
            let result = inner.batch.get(id);
            items.push(ReviewItem {
                example_id: id.to_string(),
                reason: ReviewReason::Disputed,
                confidence: result.map(|r| r.confidence),
                flags: result.map(|r| r.flags.clone()).unwrap_or_default(),
                llm_summary: result.and_then(|r| r.llm_summary.clone()),
                body: result.map(|r| r.body.clone()),
                labels,
                consensus: Consensus::Disputed,
            });
        }
        items
    }

    /// Metrics over batch results whose effective consensus is decided.
    pub fn metrics_at(&self, threshold: f64) -> Result<EvalReport, EvalError> {
        let inner = self.read();
        let (scores, truth): (Vec<f64>, Vec<Label>) = inner
            .batch
            .values()
            .filter_map(|r| {
                aggregate_labels(&self.merged(&inner, &r.example_id))
                    .label()
                    .map(|l| (r.confidence, l))
            })
            .unzip();
        evaluate(&scores, &truth, threshold)
    }
}

/// Events in a log file; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<AnnotationEvent>, StoreError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => {
            return Err(StoreError::Corrupt {
                path: path.to_path_buf(),
                line: 0,
                reason: e.to_string(),
            })
        }
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
