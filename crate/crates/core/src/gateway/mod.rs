//! Uniform access to text/image embedding and captioning backends.
//!
//! Every vector leaving the gateway is unit-normalized and rounded through
//! `f32`, the cache's storage precision, so a warm cache and a cold one
//! return bit-identical results.

mod cache;
pub mod conformance;
pub mod protocol;
mod remote;
mod stub;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheKey, EmbeddingCache, InputKind};
pub use remote::RemoteBackend;
pub use stub::{stub_caption, stub_embed_bytes, stub_embed_text, stub_tokens, StubBackend};

use crate::taxonomy::LabelEmbedder;

/// Token budgets from the generative search space; others are allowed with a warning.
pub const STANDARD_TOKEN_BUDGETS: [u32; 4] = [5, 10, 20, 40];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub backend_id: String,
    pub model_id: String,
}

impl EmbeddingVector {
    /// Normalizes `values`; `None` for zero or non-finite vectors.
    pub fn normalized(values: Vec<f64>, backend_id: &str, model_id: &str) -> Option<Self> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(EmbeddingVector {
            values: values.into_iter().map(|x| x / norm).collect(),
            backend_id: backend_id.to_string(),
            model_id: model_id.to_string(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("dimension mismatch: {0} vs {1}")]
pub struct DimensionMismatch(pub usize, pub usize);

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, DimensionMismatch> {
    cosine(&a.values, &b.values)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, DimensionMismatch> {
    if a.len() != b.len() {
        return Err(DimensionMismatch(a.len(), b.len()));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Transport failure or a transient server status; worth retrying.
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend protocol violation: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Unreachable(_) => true,
            BackendError::Status { status, .. } => *status >= 500 || *status == 429,
            BackendError::Protocol(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub model_id: String,
    pub dim: usize,
}

/// One embedding/captioning service. Vectors need not be normalized.
pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn embed_text(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
    fn embed_image(&self, model_id: &str, images: &[Vec<u8>]) -> Result<Vec<Vec<f64>>, BackendError>;
    fn caption(&self, model_id: &str, image: &[u8], prompt: &str, max_new_tokens: u32) -> Result<String, BackendError>;
    fn health(&self, model_id: &str) -> Result<Health, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Stub,
    Remote,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_batch() -> usize {
    32
}
fn default_stub_dim() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model_id: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_stub_dim")]
    pub stub_dim: usize,
}

impl BackendConfig {
    pub fn stub(model_id: &str) -> Self {
        BackendConfig {
            kind: BackendKind::Stub,
            endpoint: None,
            model_id: model_id.to_string(),
            timeout_s: default_timeout(),
            batch_size: default_batch(),
            stub_dim: default_stub_dim(),
        }
    }

    pub fn remote(endpoint: &str, model_id: &str) -> Self {
        BackendConfig { kind: BackendKind::Remote, endpoint: Some(endpoint.to_string()), ..Self::stub(model_id) }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("no inputs")]
    EmptyInput,
    #[error("{source} (after {attempts} attempt(s))")]
    Backend { source: BackendError, attempts: u32 },
    #[error("model {model_id} produced dimension {got}, expected {expected}")]
    DimensionMismatch { model_id: String, expected: usize, got: usize },
    #[error("backend returned {got} outputs for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("backend returned a zero or non-finite vector")]
    DegenerateVector,
    #[error("reading image {path}: {source}")]
    ImageRead { path: PathBuf, source: std::io::Error },
    #[error("cache: {0}")]
    Cache(std::io::Error),
}

impl GatewayError {
    /// Errors that mean the configuration itself is wrong.
    pub fn is_fatal(&self) -> bool {
        matches!(self, GatewayError::Config(_) | GatewayError::DimensionMismatch { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct GatewayStats {
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub backend_calls: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, initial_backoff: Duration::from_millis(200) }
    }
}

/// Collapse whitespace runs and trim. Applied to every text before it is
/// hashed or sent, so formatting noise cannot split cache entries.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub(crate) fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    model_id: String,
    batch_size: usize,
    retry: RetryPolicy,
    cache: EmbeddingCache,
    dim: Mutex<Option<usize>>,
    hits: AtomicU64,
    misses: AtomicU64,
    calls: AtomicU64,
}

impl Gateway {
    pub fn from_config(cfg: &BackendConfig, cache_dir: Option<&Path>) -> Result<Self, GatewayError> {
        if cfg.batch_size == 0 {
            return Err(GatewayError::Config("batch_size must be at least 1".into()));
        }
        let backend: Box<dyn Backend> = match cfg.kind {
            BackendKind::Stub => {
                if cfg.stub_dim == 0 {
                    return Err(GatewayError::Config("stub_dim must be at least 1".into()));
                }
                Box::new(StubBackend::new(cfg.stub_dim))
            }
            BackendKind::Remote => {
                let endpoint = cfg
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| GatewayError::Config("remote backend requires an endpoint".into()))?;
                Box::new(RemoteBackend::new(endpoint, Duration::from_secs_f64(cfg.timeout_s.max(0.001))))
            }
        };
        Ok(Self::with_backend(backend, &cfg.model_id, cfg.batch_size, cache_dir))
    }

    pub fn with_backend(backend: Box<dyn Backend>, model_id: &str, batch_size: usize, cache_dir: Option<&Path>) -> Self {
        Gateway {
            backend,
            model_id: model_id.to_string(),
            batch_size: batch_size.max(1),
            retry: RetryPolicy::default(),
            cache: EmbeddingCache::new(cache_dir.map(Path::to_path_buf)),
            dim: Mutex::new(None),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            calls: AtomicU64::new(0),
        }
    }

    pub fn stub(model_id: &str, dim: usize) -> Self {
        Self::with_backend(Box::new(StubBackend::new(dim)), model_id, default_batch(), None)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            cache_hits: self.hits.load(Ordering::Relaxed),
            cache_misses: self.misses.load(Ordering::Relaxed),
            backend_calls: self.calls.load(Ordering::Relaxed),
        }
    }

    pub fn health(&self) -> Result<Health, GatewayError> {
        self.call(|b| b.health(&self.model_id))
    }

    fn call<T>(&self, f: impl Fn(&dyn Backend) -> Result<T, BackendError>) -> Result<T, GatewayError> {
        let mut backoff = self.retry.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.calls.fetch_add(1, Ordering::Relaxed);
            match f(self.backend.as_ref()) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.retry.attempts => {
                    log::warn!("backend attempt {attempt} failed: {e}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(source) => return Err(GatewayError::Backend { source, attempts: attempt }),
            }
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), GatewayError> {
        let mut dim = self.dim.lock().expect("dim lock");
        match *dim {
            Some(expected) if expected != got => {
                Err(GatewayError::DimensionMismatch { model_id: self.model_id.clone(), expected, got })
            }
            _ => {
                *dim = Some(got);
                Ok(())
            }
        }
    }

    fn finish(&self, stored: Vec<f32>) -> EmbeddingVector {
        EmbeddingVector {
            values: stored.into_iter().map(f64::from).collect(),
            backend_id: self.backend_id().to_string(),
            model_id: self.model_id.clone(),
        }
    }

    /// Normalize in f64, then round to the cache precision.
    fn to_stored(raw: &[f64]) -> Result<Vec<f32>, GatewayError> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(GatewayError::DegenerateVector);
        }
        Ok(raw.iter().map(|x| (x / norm) as f32).collect())
    }

    fn key(&self, kind: InputKind, content: [u8; 32]) -> CacheKey {
        CacheKey::new(self.backend_id(), &self.model_id, kind, content)
    }

    /// Serves `keys` from cache where possible and fetches the rest in
    /// batches; duplicate keys cost one backend slot.
    fn embed_keyed<T: Clone>(
        &self,
        keys: &[CacheKey],
        payloads: &[T],
        fetch: impl Fn(&[T]) -> Result<Vec<Vec<f64>>, BackendError>,
    ) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let mut found: HashMap<String, Vec<f32>> = HashMap::new();
        let mut pending: Vec<usize> = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            let hex = key.hex();
            if found.contains_key(&hex) || pending.iter().any(|&j| keys[j].hex() == hex) {
                continue;
            }
            match self.cache.get_vector(key).map_err(GatewayError::Cache)? {
                Some(v) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    self.check_dim(v.len())?;
                    found.insert(hex, v);
                }
                None => {
                    self.misses.fetch_add(1, Ordering::Relaxed);
                    pending.push(i);
                }
            }
        }
        for chunk in pending.chunks(self.batch_size) {
            let batch: Vec<T> = chunk.iter().map(|&i| payloads[i].clone()).collect();
            let raw = self.call(|_| fetch(&batch))?;
            if raw.len() != batch.len() {
                return Err(GatewayError::CountMismatch { expected: batch.len(), got: raw.len() });
            }
            for (&i, v) in chunk.iter().zip(raw) {
                self.check_dim(v.len())?;
                let stored = Self::to_stored(&v)?;
                self.cache.put_vector(&keys[i], &stored).map_err(GatewayError::Cache)?;
                found.insert(keys[i].hex(), stored);
            }
        }
        Ok(keys.iter().map(|k| self.finish(found[&k.hex()].clone())).collect())
    }

    /// Order-preserving text embeddings.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let normalized: Vec<String> = texts.iter().map(|t| normalize_text(t)).collect();
        let keys: Vec<CacheKey> =
            normalized.iter().map(|t| self.key(InputKind::Text, sha256(&[t.as_bytes()]))).collect();
        self.embed_keyed(&keys, &normalized, |batch| self.backend.embed_text(&self.model_id, batch))
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        Ok(self.embed_texts(&[text.to_string()])?.remove(0))
    }

    /// Embeddings keyed on image bytes; unreadable files fail individually.
    pub fn embed_images(&self, image_refs: &[PathBuf]) -> Vec<Result<EmbeddingVector, GatewayError>> {
        let mut results: Vec<Option<Result<EmbeddingVector, GatewayError>>> = Vec::with_capacity(image_refs.len());
        let mut readable = Vec::new();
        let mut bytes = Vec::new();
        for (i, path) in image_refs.iter().enumerate() {
            match std::fs::read(path) {
                Ok(b) => {
                    readable.push(i);
                    bytes.push(b);
                    results.push(None);
                }
                Err(source) => results.push(Some(Err(GatewayError::ImageRead { path: path.clone(), source }))),
            }
        }
        if !readable.is_empty() {
            let keys: Vec<CacheKey> = bytes.iter().map(|b| self.key(InputKind::Image, sha256(&[b]))).collect();
            match self.embed_keyed(&keys, &bytes, |batch| self.backend.embed_image(&self.model_id, batch)) {
                Ok(vectors) => {
                    for (i, v) in readable.iter().zip(vectors) {
                        results[*i] = Some(Ok(v));
                    }
                }
                Err(e) => {
                    let message = e.to_string();
                    let fatal = e.is_fatal();
                    let mut first = Some(e);
                    for &i in &readable {
                        let err = first.take().unwrap_or_else(|| {
                            if fatal {
                                GatewayError::Config(message.clone())
                            } else {
                                GatewayError::Backend { source: BackendError::Unreachable(message.clone()), attempts: 0 }
                            }
                        });
                        results[i] = Some(Err(err));
                    }
                }
            }
        }
        results.into_iter().map(|r| r.expect("every slot filled")).collect()
    }

    pub fn embed_image(&self, image_ref: &Path) -> Result<EmbeddingVector, GatewayError> {
        self.embed_images(&[image_ref.to_path_buf()]).remove(0)
    }

    /// Cached by (image bytes, prompt, token budget).
    pub fn caption_image(&self, image_ref: &Path, prompt: &str, max_new_tokens: u32) -> Result<String, GatewayError> {
        if !STANDARD_TOKEN_BUDGETS.contains(&max_new_tokens) {
            log::warn!("max_new_tokens = {max_new_tokens} is outside the standard budgets {STANDARD_TOKEN_BUDGETS:?}");
        }
        let bytes = std::fs::read(image_ref)
            .map_err(|source| GatewayError::ImageRead { path: image_ref.to_path_buf(), source })?;
        let key = self.key(
            InputKind::Caption,
            sha256(&[&bytes, b"\0", prompt.as_bytes(), b"\0", &max_new_tokens.to_le_bytes()]),
        );
        if let Some(text) = self.cache.get_text(&key).map_err(GatewayError::Cache)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(text);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let text = self.call(|b| b.caption(&self.model_id, &bytes, prompt, max_new_tokens))?;
        self.cache.put_text(&key, &text).map_err(GatewayError::Cache)?;
        Ok(text)
    }
}

impl LabelEmbedder for Gateway {
    type Error = GatewayError;

    fn embed_labels(&self, labels: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(self.embed_texts(labels)?.into_iter().map(|v| v.values).collect())
    }
}
