use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use radseq::inference::BeamConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::{recognize_points, LoadedModel, RecognitionJson};

#[derive(Clone)]
pub struct AppState {
    pub model: Option<Arc<LoadedModel>>,
    pub beam: BeamConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognizeRequest {
    pub points: Vec<[f64; 3]>,
    #[serde(default)]
    pub beam: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct ModelInfo {
    pub vocab_size: usize,
    pub preset: String,
    pub checkpoint_hash: String,
    /// How resampled point `j` (1-based) maps to attention column.
    pub frame_map: &'static str,
    pub spacing: f64,
    pub vocab: Vec<String>,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/recognize", post(recognize_handler))
        .route("/health", get(health))
        .route("/model", get(model_info))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model_info(State(state): State<AppState>) -> Response {
    let Some(m) = state.model else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded");
    };
    Json(ModelInfo {
        vocab_size: m.model.vocab.len(),
        preset: m.model.config.preset.clone(),
        checkpoint_hash: m.hash.clone(),
        frame_map: "ceil(j/2)",
        spacing: m.model.config.spacing,
        vocab: m.model.vocab.tokens().to_vec(),
    })
    .into_response()
}

async fn recognize_handler(
    State(state): State<AppState>,
    body: Result<Json<RecognizeRequest>, JsonRejection>,
) -> Response {
    let Some(m) = state.model else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded");
    };
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let mut beam = state.beam;
    if let Some(b) = req.beam {
        if b == 0 {
            return error(StatusCode::BAD_REQUEST, "beam must be at least 1");
        }
        beam.beam = b;
    }
    let outcome =
        tokio::task::spawn_blocking(move || recognize_points(&m.model, &req.points, &beam)).await;
    match outcome {
        Ok(Ok(r)) => Json(RecognitionJson::from(&r)).into_response(),
        Ok(Err(radseq::Error::Trajectory(e))) => {
            error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Binds and serves until interrupted.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
