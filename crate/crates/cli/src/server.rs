//! HTTP inference service: `GET /health`, `GET /ontology`, `POST /extract`.
//!
//! Handlers share one immutable [`Pipeline`]; until it has loaded, `/health`
//! and `/extract` answer 503.

use std::sync::{Arc, OnceLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use anamnesis_core::app::{AppConfig, AppError, Pipeline};
use anamnesis_core::ontology::SymptomOntology;

/// Published response schema of `POST /extract`.
pub const RESPONSE_SCHEMA: &str = include_str!("../../../docs/structured_summary.schema.json");

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ExtractRequest {
    pub text: String,
    #[serde(default)]
    pub threshold: Option<f64>,
}

enum LoadState {
    Ready(Arc<Pipeline>),
    Failed(String),
}

pub struct ServiceState {
    ontology: serde_json::Value,
    max_text_chars: usize,
    pipeline: OnceLock<LoadState>,
}

impl ServiceState {
    pub fn new(ontology: &SymptomOntology, max_text_chars: usize) -> Arc<Self> {
        let nodes: Vec<_> = ontology.nodes().collect();
        Arc::new(ServiceState {
            ontology: json!({
                "root": ontology.root(),
                "content_hash": ontology.content_hash(),
                "nodes": nodes,
            }),
            max_text_chars,
            pipeline: OnceLock::new(),
        })
    }

    /// Publishes the loaded pipeline; later calls are ignored.
    pub fn set_ready(&self, pipeline: Pipeline) {
        let _ = self.pipeline.set(LoadState::Ready(Arc::new(pipeline)));
    }

    pub fn set_failed(&self, reason: String) {
        let _ = self.pipeline.set(LoadState::Failed(reason));
    }

    fn ready(&self) -> Option<Arc<Pipeline>> {
        match self.pipeline.get() {
            Some(LoadState::Ready(p)) => Some(p.clone()),
            _ => None,
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/ontology", get(ontology))
        .route("/extract", post(extract))
        .with_state(state)
}

async fn health(State(state): State<Arc<ServiceState>>) -> Response {
    match state.pipeline.get() {
        Some(LoadState::Ready(_)) => Json(json!({ "status": "ok" })).into_response(),
        Some(LoadState::Failed(reason)) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "failed", "error": reason })),
        )
            .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

async fn ontology(State(state): State<Arc<ServiceState>>) -> Response {
    Json(state.ontology.clone()).into_response()
}

async fn extract(
    State(state): State<Arc<ServiceState>>,
    body: Result<Json<ExtractRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    if req.text.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, AppError::EmptyText.to_string());
    }
    let len = req.text.chars().count();
    if len > state.max_text_chars {
        let e = AppError::TextTooLong {
            len,
            limit: state.max_text_chars,
        };
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    let Some(pipeline) = state.ready() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "models are not loaded");
    };
    let threshold = req.threshold.unwrap_or(pipeline.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return error(StatusCode::BAD_REQUEST, format!("threshold {threshold} outside [0, 1]"));
    }
    let result = tokio::task::spawn_blocking(move || pipeline.extract_with_threshold(&req.text, threshold)).await;
    match result {
        Ok(Ok(summary)) => Json(summary).into_response(),
        Ok(Err(e @ (AppError::EmptyText | AppError::TextTooLong { .. } | AppError::Config(_)))) => {
            error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => {
            tracing::error!(error = %e, "extraction failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Binds, loads the artifacts in the background and serves until Ctrl-C,
/// draining in-flight requests on shutdown.
pub async fn serve(config: AppConfig, ontology: SymptomOntology) -> anyhow::Result<()> {
    let state = ServiceState::new(&ontology, config.service.max_text_chars);
    let listener = tokio::net::TcpListener::bind(&config.service.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Pipeline::load(&config, ontology) {
        Ok(p) => {
            tracing::info!("models loaded");
            loader.set_ready(p);
        }
        Err(e) => {
            tracing::error!(error = %e, "loading models failed");
            loader.set_failed(e.to_string());
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await?;
    Ok(())
}

pub fn serve_blocking(config: AppConfig, ontology: SymptomOntology) -> anyhow::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(config, ontology))
}
