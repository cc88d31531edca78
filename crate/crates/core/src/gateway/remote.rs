use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::Agent;

use super::protocol::{
    encode_image, CaptionRequest, CaptionResponse, EmbedImageRequest, EmbedResponse, EmbedTextRequest,
    ErrorResponse, HealthResponse,
};
use super::{Backend, BackendError, Health};

const MAX_BODY: u64 = 256 * 1024 * 1024;

/// Client for a sidecar speaking the [`super::protocol`] API.
pub struct RemoteBackend {
    base: String,
    agent: Agent,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend { base: endpoint.trim_end_matches('/').to_string(), agent }
    }

    fn finish<T: DeserializeOwned>(
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, BackendError> {
        let mut resp = result.map_err(|e| BackendError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            let body = serde_json::from_str::<ErrorResponse>(&text).map(|e| e.error).unwrap_or(text);
            return Err(BackendError::Status { status, body });
        }
        resp.body_mut()
            .with_config()
            .limit(MAX_BODY)
            .read_json::<T>()
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, BackendError> {
        Self::finish(self.agent.post(format!("{}{path}", self.base)).send_json(body))
    }

    fn embeddings(resp: EmbedResponse, expected: usize) -> Result<Vec<Vec<f64>>, BackendError> {
        if resp.embeddings.len() != expected {
            return Err(BackendError::Protocol(format!(
                "{} embeddings for {expected} inputs",
                resp.embeddings.len()
            )));
        }
        if resp.embeddings.iter().any(|v| v.len() != resp.dim) {
            return Err(BackendError::Protocol(format!("embedding length differs from declared dim {}", resp.dim)));
        }
        Ok(resp.embeddings)
    }
}

impl Backend for RemoteBackend {
    fn backend_id(&self) -> &str {
        "remote"
    }

    fn embed_text(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let req = EmbedTextRequest { model_id: model_id.to_string(), texts: texts.to_vec() };
        Self::embeddings(self.post("/v1/embed_text", &req)?, texts.len())
    }

    fn embed_image(&self, model_id: &str, images: &[Vec<u8>]) -> Result<Vec<Vec<f64>>, BackendError> {
        let req = EmbedImageRequest {
            model_id: model_id.to_string(),
            images: images.iter().map(|b| encode_image(b)).collect(),
        };
        Self::embeddings(self.post("/v1/embed_image", &req)?, images.len())
    }

    fn caption(&self, model_id: &str, image: &[u8], prompt: &str, max_new_tokens: u32) -> Result<String, BackendError> {
        let req = CaptionRequest {
            model_id: model_id.to_string(),
            image: encode_image(image),
            prompt: prompt.to_string(),
            max_new_tokens,
        };
        let resp: CaptionResponse = self.post("/v1/caption", &req)?;
        Ok(resp.text)
    }

    fn health(&self, model_id: &str) -> Result<Health, BackendError> {
        let resp: HealthResponse = Self::finish(
            self.agent.get(format!("{}/v1/health", self.base)).query("model_id", model_id).call(),
        )?;
        Ok(Health { model_id: resp.model_id, dim: resp.dim })
    }
}
