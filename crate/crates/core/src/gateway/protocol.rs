//! JSON-over-HTTP protocol spoken by inference sidecars.
//!
//! | method | path              | request              | response            |
//! |--------|-------------------|----------------------|---------------------|
//! | GET    | `/v1/health`      | `?model_id=`         | [`HealthResponse`]  |
//! | POST   | `/v1/embed_text`  | [`EmbedTextRequest`] | [`EmbedResponse`]   |
//! | POST   | `/v1/embed_image` | [`EmbedImageRequest`]| [`EmbedResponse`]   |
//! | POST   | `/v1/caption`     | [`CaptionRequest`]   | [`CaptionResponse`] |
//!
//! Images travel as standard base64. Failures carry an [`ErrorResponse`]
//! body: 400 malformed, 404 unknown model, 413 batch too large, 5xx
//! backend trouble (retried by the client).

use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError};

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub model_id: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub model_id: String,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub model_id: String,
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub model_id: String,
    pub image: String,
    pub prompt: String,
    pub max_new_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub model_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthQuery {
    #[serde(default)]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub protocol_version: String,
    pub model_id: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

pub fn encode_image(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_image(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    base64::engine::general_purpose::STANDARD.decode(text)
}

/// Reference server wrapping any [`Backend`]; used to exercise clients.
#[derive(Clone)]
pub struct ServerState {
    pub backend: Arc<dyn Backend>,
    pub model_ids: Vec<String>,
    pub max_batch: usize,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorResponse { error: message.into() })).into_response()
}

fn backend_error(e: BackendError) -> Response {
    match e {
        BackendError::Status { status, body } => {
            error(StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), body)
        }
        other => error(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

impl ServerState {
    #[allow(clippy::result_large_err)]
    fn check(&self, model_id: &str, n: usize) -> Result<(), Response> {
        if !self.model_ids.iter().any(|m| m == model_id) {
            return Err(error(StatusCode::NOT_FOUND, format!("unknown model {model_id}")));
        }
        if n == 0 {
            return Err(error(StatusCode::BAD_REQUEST, "empty batch"));
        }
        if n > self.max_batch {
            return Err(error(StatusCode::PAYLOAD_TOO_LARGE, format!("batch of {n} exceeds {}", self.max_batch)));
        }
        Ok(())
    }
}

async fn health(State(s): State<ServerState>, Query(q): Query<HealthQuery>) -> Response {
    let Some(model_id) = q.model_id.or_else(|| s.model_ids.first().cloned()) else {
        return error(StatusCode::NOT_FOUND, "no models served");
    };
    if let Err(r) = s.check(&model_id, 1) {
        return r;
    }
    match s.backend.health(&model_id) {
        Ok(h) => Json(HealthResponse {
            status: "ok".into(),
            protocol_version: PROTOCOL_VERSION.into(),
            model_id: h.model_id,
            dim: h.dim,
        })
        .into_response(),
        Err(e) => backend_error(e),
    }
}

fn embed_response(model_id: String, embeddings: Vec<Vec<f64>>) -> Response {
    let dim = embeddings.first().map_or(0, Vec::len);
    Json(EmbedResponse { model_id, dim, embeddings }).into_response()
}

async fn embed_text(State(s): State<ServerState>, Json(req): Json<EmbedTextRequest>) -> Response {
    if let Err(r) = s.check(&req.model_id, req.texts.len()) {
        return r;
    }
    match s.backend.embed_text(&req.model_id, &req.texts) {
        Ok(v) => embed_response(req.model_id, v),
        Err(e) => backend_error(e),
    }
}

async fn embed_image(State(s): State<ServerState>, Json(req): Json<EmbedImageRequest>) -> Response {
    if let Err(r) = s.check(&req.model_id, req.images.len()) {
        return r;
    }
    let mut images = Vec::with_capacity(req.images.len());
    for (i, b64) in req.images.iter().enumerate() {
        match decode_image(b64) {
            Ok(b) => images.push(b),
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("image {i}: {e}")),
        }
    }
    match s.backend.embed_image(&req.model_id, &images) {
        Ok(v) => embed_response(req.model_id, v),
        Err(e) => backend_error(e),
    }
}

async fn caption(State(s): State<ServerState>, Json(req): Json<CaptionRequest>) -> Response {
    if let Err(r) = s.check(&req.model_id, 1) {
        return r;
    }
    if req.max_new_tokens == 0 {
        return error(StatusCode::BAD_REQUEST, "max_new_tokens must be positive");
    }
    let image = match decode_image(&req.image) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("image: {e}")),
    };
    match s.backend.caption(&req.model_id, &image, &req.prompt, req.max_new_tokens) {
        Ok(text) => Json(CaptionResponse { model_id: req.model_id, text }).into_response(),
        Err(e) => backend_error(e),
    }
}

pub fn router(state: ServerState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/embed_text", post(embed_text))
        .route("/v1/embed_image", post(embed_image))
        .route("/v1/caption", post(caption))
        .with_state(state)
}
