//! Deterministic model-free backend.
//!
//! Text vectors are sums of per-token pseudo-random unit vectors, so texts
//! sharing more tokens land closer together. Each token's vector comes from
//! a ChaCha20 stream keyed by the SHA-256 of the token.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{sha256, Backend, BackendError, Health};

pub fn stub_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn seeded_unit(seed: [u8; 32], dim: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::from_seed(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.next_u32() as f64 / 2_147_483_648.0 - 1.0).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Unit vector for `text`; token-free text maps to the first basis vector.
pub fn stub_embed_text(text: &str, dim: usize) -> Vec<f64> {
    let tokens = stub_tokens(text);
    let mut sum = vec![0.0; dim];
    for token in &tokens {
        let v = seeded_unit(sha256(&[b"token\0", token.as_bytes()]), dim);
        sum.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if tokens.is_empty() || norm < 1e-12 {
        let mut e0 = vec![0.0; dim];
        e0[0] = 1.0;
        return e0;
    }
    sum.into_iter().map(|x| x / norm).collect()
}

/// Unit vector derived from the digest of `bytes`.
pub fn stub_embed_bytes(bytes: &[u8], dim: usize) -> Vec<f64> {
    seeded_unit(sha256(&[b"bytes\0", bytes]), dim)
}

pub fn stub_caption(image: &[u8], prompt: &str, max_new_tokens: u32) -> String {
    let digest = sha256(&[image, b"\0", prompt.as_bytes(), b"\0", &max_new_tokens.to_le_bytes()]);
    format!("stub-caption {}", &hex::encode(digest)[..8])
}

#[derive(Debug, Clone)]
pub struct StubBackend {
    dim: usize,
}

impl StubBackend {
    pub fn new(dim: usize) -> Self {
        StubBackend { dim: dim.max(1) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Backend for StubBackend {
    fn backend_id(&self) -> &str {
        "stub"
    }

    fn embed_text(&self, _model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| stub_embed_text(t, self.dim)).collect())
    }

    fn embed_image(&self, _model_id: &str, images: &[Vec<u8>]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(images.iter().map(|b| stub_embed_bytes(b, self.dim)).collect())
    }

    fn caption(&self, _model_id: &str, image: &[u8], prompt: &str, max_new_tokens: u32) -> Result<String, BackendError> {
        Ok(stub_caption(image, prompt, max_new_tokens))
    }

    fn health(&self, model_id: &str) -> Result<Health, BackendError> {
        Ok(Health { model_id: model_id.to_string(), dim: self.dim })
    }
}
