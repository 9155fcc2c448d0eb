//! LLM verdicts: prompt construction, the chat-completion client with retry
//! and backoff, response parsing, and a deterministic mock backend.

mod prompt;
mod response;
mod transport;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use prompt::{build_prompt, PromptTemplate, TRUNCATION_MARKER};
pub use response::{parse_llm_response, parse_or_fallback, LlmFlag, LlmVerdict};
pub use transport::{
    ChatRequest, HttpTransport, ScriptedTransport, Transport, TransportError, TransportResponse,
};

use crate::config::ConfigError;
use crate::corpus::Label;
use crate::ingest::EmailDocument;
use crate::redflag::{heuristic_score, BrandProfile, Detector, DetectorConfig};

pub const DEFAULT_API_KEY_VAR: &str = "SCAMLENS_API_KEY";
pub const API_URL_VAR: &str = "SCAMLENS_API_URL";

/// Upper bound on a single backoff sleep.
const MAX_BACKOFF: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("authentication rejected by backend (HTTP {status})")]
    AuthFailure { status: u16 },
    #[error("request timed out")]
    Timeout,
    #[error("backend returned HTTP {status}: {body}")]
    BadStatus { status: u16, body: String },
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_ref: String,
    /// Per-attempt deadline, in seconds in config files.
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    /// First backoff ceiling; doubles per retry.
    #[serde(with = "duration_secs")]
    pub retry_base_delay: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/chat/completions".to_string(),
            model_name: "gpt-4".to_string(),
            api_key_ref: DEFAULT_API_KEY_VAR.to_string(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            max_concurrent_requests: 4,
            retry_base_delay: Duration::from_secs(1),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.timeout.is_zero() {
            return Err(ConfigError::Invalid("backend timeout must be > 0".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(ConfigError::Invalid(
                "max_concurrent_requests must be >= 1".into(),
            ));
        }
        if self.endpoint_url.trim().is_empty() {
            return Err(ConfigError::Invalid("endpoint_url is empty".into()));
        }
        Ok(())
    }

    /// Apply `SCAMLENS_API_URL` if set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(API_URL_VAR) {
            if !url.trim().is_empty() {
                self.endpoint_url = url;
            }
        }
        self
    }

    fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_ref).ok().filter(|k| !k.is_empty())
    }

    /// Ceiling of the full-jitter window before retry `retry` (0-based).
    pub fn backoff_ceiling(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(20));
        self.retry_base_delay.saturating_mul(factor).min(MAX_BACKOFF)
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Records requested delays without sleeping.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    delays: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn delays(&self) -> Vec<Duration> {
        self.delays.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, duration: Duration) {
        self.delays
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(duration);
    }
}

/// Counting semaphore bounding outstanding remote calls.
#[derive(Debug)]
struct Permits {
    available: Mutex<usize>,
    released: Condvar,
}

struct PermitGuard<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.released.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        PermitGuard(self)
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.released.notify_one();
    }
}

enum Attempt {
    Done(String),
    Retry(String, bool),
    Fatal(GatewayError),
}

/// Remote LLM classifier over an injectable [`Transport`].
pub struct RemoteClassifier<T> {
    backend: BackendConfig,
    template: PromptTemplate,
    transport: T,
    sleeper: Arc<dyn Sleeper>,
    jitter: Mutex<ChaCha8Rng>,
    permits: Permits,
}

impl<T: Transport> RemoteClassifier<T> {
    pub fn new(backend: BackendConfig, template: PromptTemplate, transport: T) -> Result<Self, ConfigError> {
        backend.validate()?;
        template.validate()?;
        Ok(Self {
            permits: Permits::new(backend.max_concurrent_requests),
            backend,
            template,
            transport,
            sleeper: Arc::new(ThreadSleeper),
            jitter: Mutex::new(ChaCha8Rng::from_entropy()),
        })
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_jitter_seed(self, seed: u64) -> Self {
        *self.jitter.lock().unwrap_or_else(|e| e.into_inner()) = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn backend(&self) -> &BackendConfig {
        &self.backend
    }

    pub fn request_for(&self, doc: &EmailDocument) -> ChatRequest {
        ChatRequest {
            url: self.backend.endpoint_url.clone(),
            bearer_token: self.backend.api_key(),
            body: json!({
                "model": self.backend.model_name,
                "temperature": 0,
                "messages": [
                    {"role": "system", "content": self.template.system_text},
                    {"role": "user", "content": build_prompt(doc, &self.template)},
                ],
            }),
            timeout: self.backend.timeout,
        }
    }

    fn attempt(&self, request: &ChatRequest) -> Attempt {
        let _permit = self.permits.acquire();
        match self.transport.send(request) {
            Err(TransportError::Timeout) => Attempt::Retry("timeout".into(), true),
            Err(e @ TransportError::Connection(_)) => Attempt::Retry(e.to_string(), false),
            Ok(resp) => match resp.status {
                200..=299 => Attempt::Done(message_content(&resp.body)),
                401 | 403 => Attempt::Fatal(GatewayError::AuthFailure { status: resp.status }),
                408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {}", resp.status), resp.status == 408),
                status => Attempt::Fatal(GatewayError::BadStatus {
                    status,
                    body: resp.body,
                }),
            },
        }
    }

    /// Send the document, retrying transient failures with full-jitter
    /// exponential backoff. Authentication failures are never retried.
    pub fn classify(&self, doc: &EmailDocument) -> Result<LlmVerdict, GatewayError> {
        let request = self.request_for(doc);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.attempt(&request) {
                Attempt::Done(content) => return Ok(parse_or_fallback(&content)),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(reason, timed_out) => {
                    let retries_used = attempts - 1;
                    if retries_used >= self.backend.max_retries {
                        if timed_out && self.backend.max_retries == 0 {
                            return Err(GatewayError::Timeout);
                        }
                        return Err(GatewayError::BackendUnavailable {
                            attempts,
                            last_error: reason,
                        });
                    }
                    log::debug!("attempt {attempts} failed ({reason}); backing off");
                    let ceiling = self.backend.backoff_ceiling(retries_used);
                    let delay = {
                        let mut rng = self.jitter.lock().unwrap_or_else(|e| e.into_inner());
                        ceiling.mul_f64(rng.gen::<f64>())
                    };
                    self.sleeper.sleep(delay);
                }
            }
        }
    }
}

/// The first choice's message content, or the whole body when it is not a
/// chat-completion envelope.
fn message_content(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .unwrap_or_else(|| body.to_string())
}

/// One-shot remote classification with a fresh client.
pub fn classify_remote<T: Transport>(
    doc: &EmailDocument,
    template: &PromptTemplate,
    backend: &BackendConfig,
    transport: T,
) -> Result<LlmVerdict, GatewayError> {
    RemoteClassifier::new(backend.clone(), template.clone(), transport)
        .map_err(|e| GatewayError::BackendUnavailable {
            attempts: 0,
            last_error: e.to_string(),
        })?
        .classify(doc)
}

/// Deterministic stand-in backend built on the heuristic detectors.
pub fn mock_classify_with(detector: &Detector, doc: &EmailDocument, brands: &[BrandProfile]) -> LlmVerdict {
    let flags = detector.detect(doc, brands);
    let confidence = heuristic_score(&flags);
    LlmVerdict {
        verdict: if confidence > 0.5 {
            Label::Scam
        } else {
            Label::Legitimate
        },
        confidence,
        red_flags: flags
            .iter()
            .map(|f| LlmFlag {
                category: f.category,
                evidence: f.evidence.clone(),
            })
            .collect(),
        raw_response: String::new(),
        degraded: false,
        dropped_flags: 0,
    }
}

pub fn mock_classify(doc: &EmailDocument, brands: &[BrandProfile]) -> LlmVerdict {
    let detector = Detector::new(DetectorConfig::default()).expect("default config is valid");
    mock_classify_with(&detector, doc, brands)
}
