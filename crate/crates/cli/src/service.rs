//! HTTP service: real-time classification plus the label store API used by
//! the review console.
//!
//! | route | |
//! |---|---|
//! | `POST /classify` | `{raw_email}` or `{text}` → verdict |
//! | `GET /healthz` | `ok` |
//! | `GET /queue?threshold=T` | review items |
//! | `POST /labels` | `{example_id, annotator_id, label, note?}` → stored event |
//! | `GET /labels?example_id=ID` | effective labels (all examples without `example_id`) |
//! | `GET /metrics?threshold=T` | evaluation report over stored batch results |
//! | `GET /export/labels` | corpus JSONL with effective labels |
//!
//! Errors are `{"error": {"kind": ..., "message": ...}}` with a matching
//! status code.

use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use scamlens_core::annotation::{AnnotationStore, NewLabel, StoreError};
use scamlens_core::classifier::{ClassifyError, Pipeline};
use scamlens_core::evaluation::EvalError;
use scamlens_core::ingest::{parse_email, parse_plaintext, IngestError};

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub store: Arc<AnnotationStore>,
}

impl AppState {
    pub fn new(pipeline: Pipeline, store: AnnotationStore) -> Self {
        Self {
            pipeline: Arc::new(pipeline),
            store: Arc::new(store),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, kind) = match &e {
            StoreError::UnknownExample(_) => (StatusCode::NOT_FOUND, "unknown_example"),
            StoreError::EmptyAnnotator => (StatusCode::BAD_REQUEST, "bad_request"),
            StoreError::StoreWriteFailure { .. } | StoreError::Corrupt { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "store_write_failure")
            }
        };
        ApiError::new(status, kind, e.to_string())
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

#[derive(Debug, Deserialize)]
struct ClassifyRequest {
    raw_email: Option<String>,
    text: Option<String>,
}

async fn classify(
    State(state): State<AppState>,
    body: Result<Json<ClassifyRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let doc = match (req.raw_email, req.text) {
        (Some(raw), None) if !raw.trim().is_empty() => parse_email(raw.as_bytes()).map_err(|e| match e {
            IngestError::MalformedMessage(_) => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "malformed_message",
                e.to_string(),
            ),
        })?,
        (None, Some(text)) if !text.trim().is_empty() => parse_plaintext(&text),
        (Some(_), Some(_)) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_request",
                "send either raw_email or text, not both",
            ))
        }
        _ => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "empty_input",
                "raw_email or text must be a non-empty string",
            ))
        }
    };
    // Remote backends block on network I/O.
    let pipeline = state.pipeline.clone();
    let verdict = tokio::task::spawn_blocking(move || pipeline.classify(&doc))
        .await
        .map_err(join_error)?
        .map_err(|e| match e {
            ClassifyError::Gateway(g) => {
                ApiError::new(StatusCode::BAD_GATEWAY, "backend_error", g.to_string())
            }
        })?;
    Ok(Json(verdict.report()).into_response())
}

async fn healthz() -> &'static str {
    "ok"
}

#[derive(Debug, Deserialize)]
struct ThresholdQuery {
    threshold: Option<f64>,
}

fn threshold_or_default(state: &AppState, q: &ThresholdQuery) -> Result<f64, ApiError> {
    let t = q.threshold.unwrap_or(state.pipeline.config().threshold);
    if !t.is_finite() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            "threshold must be a finite number",
        ));
    }
    Ok(t)
}

async fn queue(State(state): State<AppState>, Query(q): Query<ThresholdQuery>) -> Result<Response, ApiError> {
    let t = threshold_or_default(&state, &q)?;
    Ok(Json(state.store.review_queue(t)).into_response())
}

async fn record_label(
    State(state): State<AppState>,
    body: Result<Json<NewLabel>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(label) = body?;
    let store = state.store.clone();
    let event = tokio::task::spawn_blocking(move || store.record_label(label))
        .await
        .map_err(join_error)??;
    Ok(Json(event).into_response())
}

#[derive(Debug, Deserialize)]
struct LabelsQuery {
    example_id: Option<String>,
}

async fn labels(State(state): State<AppState>, Query(q): Query<LabelsQuery>) -> Result<Response, ApiError> {
    match q.example_id {
        Some(id) => state
            .store
            .effective_labels(&id)
            .map(|l| Json(l).into_response())
            .ok_or_else(|| ApiError::from(StoreError::UnknownExample(id))),
        None => {
            let all: Vec<_> = state
                .store
                .export_corpus()
                .examples
                .into_iter()
                .filter_map(|e| state.store.effective_labels(&e.id))
                .collect();
            Ok(Json(all).into_response())
        }
    }
}

async fn metrics(
    State(state): State<AppState>,
    Query(q): Query<ThresholdQuery>,
) -> Result<Response, ApiError> {
    let t = threshold_or_default(&state, &q)?;
    state
        .store
        .metrics_at(t)
        .map(|r| Json(r).into_response())
        .map_err(|e| match e {
            EvalError::EmptyInput => ApiError::new(
                StatusCode::CONFLICT,
                "no_results",
                "no scored examples with a decided label",
            ),
            other => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "evaluation_error",
                other.to_string(),
            ),
        })
}

async fn export_labels(State(state): State<AppState>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        state.store.export_corpus().to_jsonl(),
    )
        .into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/classify", post(classify))
        .route("/healthz", get(healthz))
        .route("/queue", get(queue))
        .route("/labels", post(record_label).get(labels))
        .route("/metrics", get(metrics))
        .route("/export/labels", get(export_labels))
        .with_state(state)
}

/// Serve until `shutdown` resolves, then finish in-flight requests.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            log::error!("cannot listen for Ctrl-C: {e}");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(e) => {
                log::error!("cannot listen for SIGTERM: {e}");
                std::future::pending::<()>().await;
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}
