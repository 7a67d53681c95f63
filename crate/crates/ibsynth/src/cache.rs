//! Content-addressed response cache.
//!
//! Every provider response (descriptions, candidate answers, rewrites,
//! embeddings) is stored under a key derived from its logical inputs, so
//! reruns replay from disk instead of re-calling providers. Writes are
//! atomic (temp file + rename); a corrupt entry reads as a miss plus a
//! warning, never as silent bad data.

use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{content_hash, sha256_hex, write_atomic};

/// What kind of payload a cache entry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheKind {
    Description,
    Embedding,
    Candidate,
    Rewrite,
}

impl CacheKind {
    fn dir_name(self) -> &'static str {
        match self {
            CacheKind::Description => "description",
            CacheKind::Embedding => "embedding",
            CacheKind::Candidate => "candidate",
            CacheKind::Rewrite => "rewrite",
        }
    }
}

/// Stable identity of one cached response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub kind: CacheKind,
    /// Hex SHA-256 over the canonicalized logical inputs (each part trimmed
    /// and NFC-normalized, joined with a fixed separator).
    pub content_hash: String,
    pub model_id: String,
}

impl CacheKey {
    pub fn new(kind: CacheKind, model_id: &str, parts: &[&str]) -> Self {
        CacheKey {
            kind,
            content_hash: content_hash(parts),
            model_id: model_id.to_string(),
        }
    }
}

/// On-disk envelope: payload bytes plus their checksum for corruption
/// detection on read.
#[derive(Serialize, Deserialize)]
struct Envelope {
    sha256: String,
    payload: String, // base64
}

/// Filesystem cache rooted at one directory, laid out as
/// `<root>/<kind>/<model_id>/<first two hash hex chars>/<hash>.json`.
#[derive(Debug, Clone)]
pub struct FileCache {
    root: PathBuf,
}

impl FileCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FileCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        let model_dir: String = key
            .model_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let prefix = &key.content_hash[..2];
        self.root
            .join(key.kind.dir_name())
            .join(model_dir)
            .join(prefix)
            .join(format!("{}.json", key.content_hash))
    }

    /// Look up a cached payload. Any read failure — absent file, unparseable
    /// envelope, checksum mismatch — is a miss; corruption logs a warning.
    pub fn get(&self, key: &CacheKey) -> Option<Vec<u8>> {
        let path = self.entry_path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache read failed at {}: {e}; treating as miss", path.display());
                return None;
            }
        };
        let envelope: Envelope = match serde_json::from_slice(&bytes) {
            Ok(env) => env,
            Err(e) => {
                log::warn!("corrupt cache entry {}: {e}; treating as miss", path.display());
                return None;
            }
        };
        let payload = match base64::engine::general_purpose::STANDARD.decode(&envelope.payload) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("corrupt cache entry {}: {e}; treating as miss", path.display());
                return None;
            }
        };
        if sha256_hex(&payload) != envelope.sha256 {
            log::warn!(
                "cache checksum mismatch at {}; treating as miss",
                path.display()
            );
            return None;
        }
        Some(payload)
    }

    /// Store a payload atomically. Concurrent writers of the same key are
    /// harmless: both write identical content and rename over each other.
    pub fn put(&self, key: &CacheKey, payload: &[u8]) -> Result<()> {
        let envelope = Envelope {
            sha256: sha256_hex(payload),
            payload: base64::engine::general_purpose::STANDARD.encode(payload),
        };
        let bytes = serde_json::to_vec(&envelope).map_err(|e| Error::Cache(e.to_string()))?;
        write_atomic(&self.entry_path(key), &bytes)
    }

    /// Convenience: fetch a UTF-8 text payload.
    pub fn get_text(&self, key: &CacheKey) -> Option<String> {
        self.get(key).and_then(|bytes| match String::from_utf8(bytes) {
            Ok(s) => Some(s),
            Err(_) => {
                log::warn!("cache entry for {:?} is not UTF-8; treating as miss", key.content_hash);
                None
            }
        })
    }

    pub fn put_text(&self, key: &CacheKey, text: &str) -> Result<()> {
        self.put(key, text.as_bytes())
    }
}
