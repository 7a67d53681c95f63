//! Embedding vectors, cosine similarity, and the offline deterministic
//! embedder used by tests and the synthetic-world study.

use serde::{Deserialize, Serialize};

use crate::cache::{CacheKey, CacheKind, FileCache};
use crate::error::{Error, Result};
use crate::util::fnv1a64;

/// An L2-normalized embedding tagged with the model that produced it.
/// Vectors from different models must never be compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    /// Build a vector, L2-normalizing the raw values. All-zero or non-finite
    /// input is rejected.
    pub fn normalized(model_id: &str, mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Embed("empty embedding vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::Embed("cannot normalize an all-zero vector".into()));
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(EmbeddingVector { model_id: model_id.to_string(), values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Cosine similarity between two vectors of the same model and dimension.
/// The result is clamped to [-1, 1] to absorb floating-point drift.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.model_id != b.model_id {
        return Err(Error::Embed(format!(
            "cannot compare embeddings from '{}' and '{}'",
            a.model_id, b.model_id
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::Embed(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let norm_a = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b = b.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a <= 0.0 || norm_b <= 0.0 {
        return Err(Error::Embed("cosine of a zero-norm vector is undefined".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

/// A text-embedding backend. Implementations must be deterministic per
/// (model_id, text) or hide their nondeterminism behind the cache layer.
pub trait TextEmbedder: Send + Sync {
    fn model_id(&self) -> &str;
    /// Embed a batch, preserving input order. Output length must equal the
    /// input length and every vector must be L2-normalized.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

impl TextEmbedder for Box<dyn TextEmbedder> {
    fn model_id(&self) -> &str {
        self.as_ref().model_id()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.as_ref().embed_batch(texts)
    }
}

/// Minimum dimension accepted by the deterministic embedder; below this the
/// token-bucket collisions make every text look alike.
pub const MIN_DETERMINISTIC_DIM: usize = 8;

/// Offline hashing embedder: lowercase bag-of-words, each token bucketed by
/// a seeded 64-bit FNV-1a hash modulo the dimension, counts L2-normalized.
/// Fully deterministic across platforms, no network, no weights.
#[derive(Debug, Clone)]
pub struct DeterministicEmbedder {
    dim: usize,
    model_id: String,
}

impl DeterministicEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < MIN_DETERMINISTIC_DIM {
            return Err(Error::Config(format!(
                "deterministic embedder dimension must be at least {MIN_DETERMINISTIC_DIM}, got {dim}"
            )));
        }
        Ok(DeterministicEmbedder { dim, model_id: format!("deterministic-bow-{dim}") })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embed one text. Texts with no alphanumeric tokens are an error.
    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let lowered = text.to_lowercase();
        let mut counts = vec![0.0_f64; self.dim];
        let mut any = false;
        for token in lowered.split(|c: char| !c.is_alphanumeric()) {
            if token.is_empty() {
                continue;
            }
            any = true;
            let bucket = (fnv1a64(token.as_bytes()) % self.dim as u64) as usize;
            counts[bucket] += 1.0;
        }
        if !any {
            return Err(Error::Embed(format!(
                "text has no embeddable tokens: {text:?}"
            )));
        }
        EmbeddingVector::normalized(&self.model_id, counts)
    }
}

impl TextEmbedder for DeterministicEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

/// Serialized form of a cached embedding.
#[derive(Serialize, Deserialize)]
struct CachedVector {
    model_id: String,
    dim: usize,
    values: Vec<f64>,
}

/// Wraps any embedder with the content-addressed cache: hits skip the inner
/// backend entirely, misses are batched through it and stored.
pub struct CachingEmbedder<E> {
    inner: E,
    cache: FileCache,
}

impl<E: TextEmbedder> CachingEmbedder<E> {
    pub fn new(inner: E, cache: FileCache) -> Self {
        CachingEmbedder { inner, cache }
    }

    fn key_for(&self, text: &str) -> CacheKey {
        CacheKey::new(CacheKind::Embedding, self.inner.model_id(), &[text])
    }
}

impl<E: TextEmbedder> TextEmbedder for CachingEmbedder<E> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        let mut miss_idx = Vec::new();
        let mut miss_texts = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            let key = self.key_for(text);
            if let Some(bytes) = self.cache.get(&key) {
                if let Ok(cached) = serde_json::from_slice::<CachedVector>(&bytes) {
                    if cached.model_id == self.inner.model_id() && cached.dim == cached.values.len() {
                        out[i] = Some(EmbeddingVector {
                            model_id: cached.model_id,
                            values: cached.values,
                        });
                        continue;
                    }
                }
                log::warn!("ignoring malformed cached embedding for {:?}", key.content_hash);
            }
            miss_idx.push(i);
            miss_texts.push(text.clone());
        }
        if !miss_texts.is_empty() {
            let fresh = self.inner.embed_batch(&miss_texts)?;
            if fresh.len() != miss_texts.len() {
                return Err(Error::Embed(format!(
                    "embedder returned {} vectors for {} inputs",
                    fresh.len(),
                    miss_texts.len()
                )));
            }
            for (slot, (text, vector)) in miss_idx.into_iter().zip(miss_texts.iter().zip(fresh)) {
                let cached = CachedVector {
                    model_id: vector.model_id.clone(),
                    dim: vector.dim(),
                    values: vector.values.clone(),
                };
                let bytes =
                    serde_json::to_vec(&cached).map_err(|e| Error::Cache(e.to_string()))?;
                self.cache.put(&self.key_for(text), &bytes)?;
                out[slot] = Some(vector);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("all slots filled")).collect())
    }
}

/// Embed a slice of texts one-key-per-text through any embedder.
pub fn embed_all(embedder: &dyn TextEmbedder, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    let vectors = embedder.embed_batch(texts)?;
    if vectors.len() != texts.len() {
        return Err(Error::Embed(format!(
            "embedder returned {} vectors for {} inputs",
            vectors.len(),
            texts.len()
        )));
    }
    Ok(vectors)
}
