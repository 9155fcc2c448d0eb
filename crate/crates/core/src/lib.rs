//! Scam and phishing email detection.
//!
//! Emails are parsed into an [`EmailDocument`], scanned by a rule-based red
//! flag [`Detector`], optionally sent to an LLM backend for a structured
//! verdict, and the two signals are fused into a confidence that is compared
//! against a threshold. The crate also covers labeled corpora, evaluation
//! metrics, threshold tuning, and the label store used for human review.

pub mod annotation;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod fixtures;
pub mod gateway;
pub mod ingest;
pub mod redflag;

pub use annotation::{AnnotationEvent, AnnotationStore, BatchResult, NewLabel, ReviewItem};
pub use classifier::{
    decide, fuse, fuse_scores, BackendChoice, FusionWeights, Pipeline, Verdict, VerdictReport,
};
pub use config::{ConfigError, PipelineConfig};
pub use corpus::{aggregate_labels, cohen_kappa, load_corpus, Consensus, Corpus, Label, LabeledExample};
pub use evaluation::{auc, confusion, evaluate, metrics, threshold_sweep, tune, ConfusionMatrix, EvalReport};
pub use gateway::{GatewayError, LlmVerdict};
pub use ingest::{parse_any, parse_email, parse_plaintext, EmailDocument, IngestError};
pub use redflag::{default_brands, detect_flags, heuristic_score, Detector, FlagCategory, RedFlag};
