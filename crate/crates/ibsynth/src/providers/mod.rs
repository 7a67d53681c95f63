//! Text/vision generation providers: the common request shape, a
//! content-addressed caching wrapper, a scripted mock for offline runs, and
//! OpenAI-compatible remote clients.

pub mod mock;
pub mod openai;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheKey, CacheKind, FileCache};
use crate::error::{Error, Result};

/// What stage a generation request belongs to. Drives cache partitioning
/// and lets mock scripts target specific stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Description,
    Candidate,
    Rewrite,
    Judge,
}

/// One generation request. Image references are forwarded opaquely; this
/// crate never decodes image content.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmRequest {
    pub kind: RequestKind,
    /// Image the request is about; empty for judge calls.
    pub image_id: String,
    /// Attached image reference, when the provider should see the image.
    pub image_ref: Option<String>,
    pub prompt: String,
    pub temperature: f64,
    /// Distinguishes repeated samples of the same prompt.
    pub sample_index: u32,
    /// Pipeline round the request belongs to (0 for initial synthesis).
    pub round: u32,
}

/// A chat-style generation backend.
pub trait LmmProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &LmmRequest) -> Result<String>;
}

impl LmmProvider for Box<dyn LmmProvider> {
    fn model_id(&self) -> &str {
        self.as_ref().model_id()
    }
    fn complete(&self, request: &LmmRequest) -> Result<String> {
        self.as_ref().complete(request)
    }
}

impl RequestKind {
    fn cache_kind(self) -> Option<CacheKind> {
        match self {
            RequestKind::Description => Some(CacheKind::Description),
            RequestKind::Candidate => Some(CacheKind::Candidate),
            RequestKind::Rewrite => Some(CacheKind::Rewrite),
            // Judge calls are one-shot evaluation traffic, never cached.
            RequestKind::Judge => None,
        }
    }
}

/// Caching wrapper: identical logical requests replay from disk, so reruns
/// make zero provider calls. Judge requests pass through uncached.
pub struct CachingLmm<P> {
    inner: P,
    cache: FileCache,
}

impl<P: LmmProvider> CachingLmm<P> {
    pub fn new(inner: P, cache: FileCache) -> Self {
        CachingLmm { inner, cache }
    }

    fn key_for(&self, request: &LmmRequest) -> Option<CacheKey> {
        let kind = request.kind.cache_kind()?;
        let sample = request.sample_index.to_string();
        let temperature = format!("{:.6}", request.temperature);
        let image_ref = request.image_ref.clone().unwrap_or_default();
        Some(CacheKey::new(
            kind,
            self.inner.model_id(),
            &[
                &request.image_id,
                &image_ref,
                &request.prompt,
                &sample,
                &temperature,
            ],
        ))
    }
}

impl<P: LmmProvider> LmmProvider for CachingLmm<P> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &LmmRequest) -> Result<String> {
        let Some(key) = self.key_for(request) else {
            return self.inner.complete(request);
        };
        if let Some(text) = self.cache.get_text(&key) {
            return Ok(text);
        }
        let text = self.inner.complete(request)?;
        self.cache.put_text(&key, &text)?;
        Ok(text)
    }
}

/// Convenience constructor for a provider-failure error.
pub fn provider_error(provider: &str, message: impl Into<String>) -> Error {
    Error::Provider { provider: provider.to_string(), message: message.into() }
}
