//! Signal fusion and the threshold decision.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::Label;
use crate::gateway::{
    mock_classify_with, GatewayError, HttpTransport, LlmVerdict, RemoteClassifier, Transport,
};
use crate::ingest::EmailDocument;
use crate::redflag::{heuristic_score, Detector, RedFlag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct FusionWeights {
    w_heuristic: f64,
    w_llm: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    w_heuristic: f64,
    w_llm: f64,
}

impl TryFrom<RawWeights> for FusionWeights {
    type Error = ConfigError;

    fn try_from(raw: RawWeights) -> Result<Self, Self::Error> {
        FusionWeights::new(raw.w_heuristic, raw.w_llm)
    }
}

impl From<FusionWeights> for RawWeights {
    fn from(w: FusionWeights) -> Self {
        RawWeights {
            w_heuristic: w.w_heuristic,
            w_llm: w.w_llm,
        }
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            w_heuristic: 0.5,
            w_llm: 0.5,
        }
    }
}

impl FusionWeights {
    /// Non-negative weights, normalized to sum to one.
    pub fn new(w_heuristic: f64, w_llm: f64) -> Result<Self, ConfigError> {
        let valid = |w: f64| w.is_finite() && w >= 0.0;
        if !valid(w_heuristic) || !valid(w_llm) || w_heuristic + w_llm <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "fusion weights must be non-negative with a positive sum, got ({w_heuristic}, {w_llm})"
            )));
        }
        let total = w_heuristic + w_llm;
        Ok(Self {
            w_heuristic: w_heuristic / total,
            w_llm: w_llm / total,
        })
    }

    /// Weights with the given LLM share in [0, 1].
    pub fn with_llm_share(w_llm: f64) -> Result<Self, ConfigError> {
        Self::new(1.0 - w_llm, w_llm)
    }

    pub fn w_heuristic(&self) -> f64 {
        self.w_heuristic
    }

    pub fn w_llm(&self) -> f64 {
        self.w_llm
    }
}

/// Convex combination of the two signals. Without an LLM score the
/// heuristic score is returned as is.
pub fn fuse_scores(heuristic: f64, llm_confidence: Option<f64>, weights: FusionWeights) -> f64 {
    let fused = match llm_confidence {
        Some(llm) => weights.w_heuristic * heuristic + weights.w_llm * llm,
        None => heuristic,
    };
    fused.clamp(0.0, 1.0)
}

pub fn fuse(heuristic: f64, llm: Option<&LlmVerdict>, weights: FusionWeights) -> f64 {
    fuse_scores(heuristic, llm.map(|v| v.confidence), weights)
}

/// Scam iff the confidence is strictly above the threshold.
pub fn decide(confidence: f64, threshold: f64) -> Label {
    if confidence > threshold {
        Label::Scam
    } else {
        Label::Legitimate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Mock,
    Remote,
    /// Heuristics only.
    Offline,
}

impl std::str::FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "remote" => Ok(Self::Remote),
            "offline" => Ok(Self::Offline),
            other => Err(format!(
                "unknown backend {other:?} (expected mock, remote or offline)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect_us: u64,
    pub llm_us: u64,
    pub total_us: u64,
}

fn micros(d: Duration) -> u64 {
    u64::try_from(d.as_micros()).unwrap_or(u64::MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub confidence: f64,
    pub decision: Label,
    pub threshold_used: f64,
    pub heuristic_score: f64,
    pub flags: Vec<RedFlag>,
    pub llm: Option<LlmVerdict>,
    /// The LLM answer came from keyword fallback, or the LLM failed and the
    /// verdict is heuristic-only.
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_error: Option<String>,
    pub timings: StageTimings,
}

impl Verdict {
    /// Equality on everything except timings.
    pub fn same_outcome(&self, other: &Verdict) -> bool {
        Verdict {
            timings: StageTimings::default(),
            ..self.clone()
        } == Verdict {
            timings: StageTimings::default(),
            ..other.clone()
        }
    }

    pub fn report(&self) -> VerdictReport {
        VerdictReport {
            decision: self.decision,
            confidence: self.confidence,
            threshold: self.threshold_used,
            heuristic_score: self.heuristic_score,
            flags: self
                .flags
                .iter()
                .map(|f| FlagReport {
                    category: f.category,
                    evidence: f.evidence.clone(),
                    offset: f.offset,
                })
                .collect(),
            llm: self.llm.as_ref().map(|v| LlmReport {
                verdict: v.verdict,
                confidence: v.confidence,
                degraded: v.degraded,
                red_flags: v.red_flags.len(),
            }),
            degraded: self.degraded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagReport {
    pub category: crate::redflag::FlagCategory,
    pub evidence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmReport {
    pub verdict: Label,
    pub confidence: f64,
    pub degraded: bool,
    pub red_flags: usize,
}

/// Machine-readable verdict shared by `scan --json` and `POST /classify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub decision: Label,
    pub confidence: f64,
    pub threshold: f64,
    pub heuristic_score: f64,
    pub flags: Vec<FlagReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<LlmReport>,
    pub degraded: bool,
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// A configured detection pipeline: detectors, LLM backend, fusion and
/// threshold. Cheap to share behind an `Arc`.
pub struct Pipeline {
    config: PipelineConfig,
    detector: Detector,
    remote: Option<RemoteClassifier<Box<dyn Transport>>>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("config", &self.config)
            .field("remote", &self.remote.is_some())
            .finish()
    }
}

impl Pipeline {
    /// Remote backends use the HTTP transport.
    pub fn new(config: PipelineConfig) -> Result<Self, ConfigError> {
        Self::with_transport(config, Box::new(HttpTransport::new()))
    }

    pub fn with_transport(
        config: PipelineConfig,
        transport: Box<dyn Transport>,
    ) -> Result<Self, ConfigError> {
        let remote = match config.backend {
            BackendChoice::Remote => Some(RemoteClassifier::new(
                config.remote.clone().with_env_overrides(),
                config.prompt.clone(),
                transport,
            )?),
            _ => None,
        };
        Self::with_remote(config, remote)
    }

    pub fn with_remote(
        config: PipelineConfig,
        remote: Option<RemoteClassifier<Box<dyn Transport>>>,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            detector: Detector::new(config.detector.clone())?,
            config,
            remote,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn classify(&self, doc: &EmailDocument) -> Result<Verdict, ClassifyError> {
        self.classify_at(doc, self.config.threshold)
    }

    pub fn classify_at(&self, doc: &EmailDocument, threshold: f64) -> Result<Verdict, ClassifyError> {
        let started = Instant::now();
        let brands = &self.config.detector.brands;
        let flags = self.detector.detect(doc, brands);
        let heuristic = heuristic_score(&flags);
        let detect_done = Instant::now();

        let (llm, llm_error) = match (self.config.backend, &self.remote) {
            (BackendChoice::Mock, _) => (Some(mock_classify_with(&self.detector, doc, brands)), None),
            (BackendChoice::Remote, Some(remote)) => match remote.classify(doc) {
                Ok(v) => (Some(v), None),
                Err(e) if self.config.require_llm => return Err(e.into()),
                Err(e) => {
                    log::warn!("LLM backend failed, using heuristics only: {e}");
                    (None, Some(e.to_string()))
                }
            },
            (BackendChoice::Remote, None) => (None, Some("remote backend not configured".into())),
            (BackendChoice::Offline, _) => (None, None),
        };
        let llm_done = Instant::now();

        let confidence = fuse(heuristic, llm.as_ref(), self.config.fusion);
        let degraded = llm.as_ref().is_some_and(|v| v.degraded) || llm_error.is_some();
        Ok(Verdict {
            confidence,
            decision: decide(confidence, threshold),
            threshold_used: threshold,
            heuristic_score: heuristic,
            flags,
            llm,
            degraded,
            llm_error,
            timings: StageTimings {
                detect_us: micros(detect_done - started),
                llm_us: micros(llm_done - detect_done),
                total_us: micros(llm_done - started),
            },
        })
    }
}
