//! Content-addressed cache of embeddings and captions.
//!
//! Files are `<dir>/<hex digest>.bin` with a 16-byte header: 4-byte magic,
//! then little-endian u32 version, u32 length, u32 reserved. Embeddings
//! (`CAEV`) store `length` little-endian f32 values; captions (`CACP`) store
//! `length` UTF-8 bytes.

use std::collections::HashMap;
use std::io;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::sha256;
use crate::fsutil::write_atomic;

const MAGIC_VECTOR: &[u8; 4] = b"CAEV";
const MAGIC_CAPTION: &[u8; 4] = b"CACP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Text,
    Image,
    Caption,
}

impl InputKind {
    fn tag(self) -> &'static [u8] {
        match self {
            InputKind::Text => b"text",
            InputKind::Image => b"image",
            InputKind::Caption => b"caption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub backend_id: String,
    pub model_id: String,
    pub input_kind: InputKind,
    pub content_hash: [u8; 32],
}

impl CacheKey {
    pub fn new(backend_id: &str, model_id: &str, input_kind: InputKind, content_hash: [u8; 32]) -> Self {
        CacheKey { backend_id: backend_id.to_string(), model_id: model_id.to_string(), input_kind, content_hash }
    }

    pub fn hex(&self) -> String {
        hex::encode(sha256(&[
            self.backend_id.as_bytes(),
            b"\0",
            self.model_id.as_bytes(),
            b"\0",
            self.input_kind.tag(),
            b"\0",
            &self.content_hash,
        ]))
    }
}

#[derive(Clone)]
enum Entry {
    Vector(Vec<f32>),
    Text(String),
}

pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Entry>>,
}

fn header(magic: &[u8; 4], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

fn parse<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> io::Result<(usize, &'a [u8])> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != magic {
        return Err(invalid("bad cache header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(invalid(format!("unsupported cache version {}", word(4))));
    }
    Ok((word(8) as usize, &bytes[HEADER_LEN..]))
}

pub fn encode_vector(values: &[f32]) -> Vec<u8> {
    let mut out = header(MAGIC_VECTOR, values.len());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vector(bytes: &[u8]) -> io::Result<Vec<f32>> {
    let (dim, payload) = parse(bytes, MAGIC_VECTOR)?;
    if payload.len() != dim * 4 {
        return Err(invalid(format!("payload {} bytes for dim {dim}", payload.len())));
    }
    Ok(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

fn encode_text(text: &str) -> Vec<u8> {
    let mut out = header(MAGIC_CAPTION, text.len());
    out.extend_from_slice(text.as_bytes());
    out
}

fn decode_text(bytes: &[u8]) -> io::Result<String> {
    let (len, payload) = parse(bytes, MAGIC_CAPTION)?;
    if payload.len() != len {
        return Err(invalid("caption length mismatch".into()));
    }
    String::from_utf8(payload.to_vec()).map_err(|e| invalid(e.to_string()))
}

impl EmbeddingCache {
    /// Memory-only when `dir` is `None`.
    pub fn new(dir: Option<PathBuf>) -> Self {
        EmbeddingCache { dir, memory: Mutex::new(HashMap::new()) }
    }

    fn path(&self, hex: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{hex}.bin")))
    }

    fn read_file(&self, hex: &str) -> io::Result<Option<Vec<u8>>> {
        let Some(path) = self.path(hex) else { return Ok(None) };
        match std::fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn get_vector(&self, key: &CacheKey) -> io::Result<Option<Vec<f32>>> {
        let hex = key.hex();
        if let Some(Entry::Vector(v)) = self.memory.lock().expect("cache lock").get(&hex) {
            return Ok(Some(v.clone()));
        }
        let Some(bytes) = self.read_file(&hex)? else { return Ok(None) };
        match decode_vector(&bytes) {
            Ok(v) => {
                self.memory.lock().expect("cache lock").insert(hex, Entry::Vector(v.clone()));
                Ok(Some(v))
            }
            Err(e) => {
                // a torn or foreign file is a miss; it will be rewritten
                log::warn!("ignoring unreadable cache entry {hex}: {e}");
                Ok(None)
            }
        }
    }

    pub fn put_vector(&self, key: &CacheKey, values: &[f32]) -> io::Result<()> {
        let hex = key.hex();
        if let Some(path) = self.path(&hex) {
            write_atomic(&path, &encode_vector(values))?;
        }
        self.memory.lock().expect("cache lock").insert(hex, Entry::Vector(values.to_vec()));
        Ok(())
    }

    pub fn get_text(&self, key: &CacheKey) -> io::Result<Option<String>> {
        let hex = key.hex();
        if let Some(Entry::Text(t)) = self.memory.lock().expect("cache lock").get(&hex) {
            return Ok(Some(t.clone()));
        }
        let Some(bytes) = self.read_file(&hex)? else { return Ok(None) };
        match decode_text(&bytes) {
            Ok(t) => {
                self.memory.lock().expect("cache lock").insert(hex, Entry::Text(t.clone()));
                Ok(Some(t))
            }
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {hex}: {e}");
                Ok(None)
            }
        }
    }

    pub fn put_text(&self, key: &CacheKey, text: &str) -> io::Result<()> {
        let hex = key.hex();
        if let Some(path) = self.path(&hex) {
            write_atomic(&path, &encode_text(text))?;
        }
        self.memory.lock().expect("cache lock").insert(hex, Entry::Text(text.to_string()));
        Ok(())
    }
}
