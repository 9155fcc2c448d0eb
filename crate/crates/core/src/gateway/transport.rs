use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

/// One outbound chat-completion call.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub url: String,
    pub bearer_token: Option<String>,
    pub body: Value,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connection(String),
}

/// Sends requests to an LLM backend. Implementations must be safe to call
/// from several threads at once.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<TransportResponse, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, request: &ChatRequest) -> Result<TransportResponse, TransportError> {
        (**self).send(request)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&self, request: &ChatRequest) -> Result<TransportResponse, TransportError> {
        (**self).send(request)
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn send(&self, request: &ChatRequest) -> Result<TransportResponse, TransportError> {
        (**self).send(request)
    }
}

/// Blocking HTTP transport. The client is built on first use, so the value
/// can be created inside an async runtime as long as `send` runs on a
/// blocking thread.
#[derive(Debug, Default)]
pub struct HttpTransport {
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::default()
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(reqwest::blocking::Client::new)
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<TransportResponse, TransportError> {
        let mut builder = self
            .client()
            .post(&request.url)
            .timeout(request.timeout)
            .json(&request.body);
        if let Some(token) = &request.bearer_token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connection(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connection(e.to_string())
            }
        })?;
        Ok(TransportResponse { status, body })
    }
}

impl TransportResponse {
    /// A 200 chat-completion envelope whose first choice carries `content`.
    pub fn chat(content: &str) -> Self {
        Self {
            status: 200,
            body: serde_json::json!({
                "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
            })
            .to_string(),
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: String::new(),
        }
    }
}

/// Replays a fixed list of outcomes, one per call; the last outcome repeats
/// once the script runs out. Records every request it receives.
#[derive(Debug)]
pub struct ScriptedTransport {
    script: Vec<Result<TransportResponse, TransportError>>,
    requests: std::sync::Mutex<Vec<ChatRequest>>,
}

impl ScriptedTransport {
    pub fn new(script: Vec<Result<TransportResponse, TransportError>>) -> Self {
        assert!(!script.is_empty(), "script needs at least one outcome");
        Self {
            script,
            requests: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &ChatRequest) -> Result<TransportResponse, TransportError> {
        let mut requests = self.requests.lock().unwrap_or_else(|e| e.into_inner());
        let i = requests.len().min(self.script.len() - 1);
        requests.push(request.clone());
        self.script[i].clone()
    }
}
