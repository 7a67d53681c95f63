//! OpenAI-compatible remote clients: `/v1/embeddings` for text embeddings
//! and `/v1/chat/completions` for vision-language generation.
//!
//! Transport failures and 5xx responses are retried with exponential
//! backoff; 4xx responses fail fast. Embeddings are L2-normalized on
//! receipt and batched; batches run under a bounded in-flight budget.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingVector, TextEmbedder};
use crate::error::{Error, Result};
use crate::providers::{provider_error, LmmProvider, LmmRequest};

/// Environment variable holding the embedding endpoint's API key.
pub const EMBED_API_KEY_ENV: &str = "IBSYNTH_EMBED_API_KEY";
/// Environment variable holding the generation endpoint's API key.
pub const LMM_API_KEY_ENV: &str = "IBSYNTH_LMM_API_KEY";

/// Connection settings shared by both remote clients.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    /// Total attempts per request (first try + retries).
    pub max_attempts: u32,
    /// Backoff before retry k is `backoff_ms << (k-1)`.
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
}

impl HttpConfig {
    pub fn new(base_url: &str, model: &str, api_key_env: &str) -> Self {
        HttpConfig {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            max_attempts: 3,
            backoff_ms: 200,
            timeout_ms: 60_000,
            api_key_env: api_key_env.to_string(),
        }
    }
}

fn agent(config: &HttpConfig) -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(config.timeout_ms))
        .build()
}

/// POST a JSON body, retrying transport errors and 5xx with exponential
/// backoff. Returns the response body text.
fn post_json_with_retry(
    agent: &ureq::Agent,
    config: &HttpConfig,
    url: &str,
    body: &serde_json::Value,
) -> Result<String> {
    let api_key = std::env::var(&config.api_key_env).ok();
    let mut last_error = String::new();
    for attempt in 1..=config.max_attempts.max(1) {
        if attempt > 1 {
            let wait = config.backoff_ms << (attempt - 2);
            std::thread::sleep(Duration::from_millis(wait));
        }
        let mut request = agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = &api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        match request.send_string(&body.to_string()) {
            Ok(response) => {
                return response
                    .into_string()
                    .map_err(|e| provider_error(&config.model, format!("reading response: {e}")));
            }
            Err(ureq::Error::Status(code, response)) => {
                let text = response.into_string().unwrap_or_default();
                if code >= 500 {
                    last_error = format!("HTTP {code}: {text}");
                    continue;
                }
                return Err(provider_error(
                    &config.model,
                    format!("HTTP {code} (not retryable): {text}"),
                ));
            }
            Err(ureq::Error::Transport(t)) => {
                last_error = t.to_string();
                continue;
            }
        }
    }
    Err(provider_error(
        &config.model,
        format!("gave up after {} attempts: {last_error}", config.max_attempts),
    ))
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EmbeddingsBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// Remote embedding client. Splits input into batches and runs up to
/// `in_flight` batches concurrently; order is restored by batch position.
pub struct RemoteEmbedder {
    config: HttpConfig,
    batch_size: usize,
    in_flight: usize,
}

impl RemoteEmbedder {
    pub fn new(config: HttpConfig) -> Self {
        RemoteEmbedder { config, batch_size: 64, in_flight: 4 }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn with_in_flight(mut self, in_flight: usize) -> Self {
        self.in_flight = in_flight.max(1);
        self
    }

    fn embed_one_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let agent = agent(&self.config);
        let url = format!("{}/v1/embeddings", self.config.base_url);
        let body = serde_json::to_value(EmbeddingsBody { model: &self.config.model, input: texts })
            .map_err(|e| provider_error(&self.config.model, e.to_string()))?;
        let text = post_json_with_retry(&agent, &self.config, &url, &body)?;
        let parsed: EmbeddingsResponse = serde_json::from_str(&text)
            .map_err(|e| provider_error(&self.config.model, format!("bad response body: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(Error::Embed(format!(
                "embedding batch shape mismatch: sent {} texts, got {} vectors",
                texts.len(),
                parsed.data.len()
            )));
        }
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        let mut dim: Option<usize> = None;
        for datum in parsed.data {
            if datum.index >= slots.len() {
                return Err(Error::Embed(format!(
                    "embedding index {} out of range for batch of {}",
                    datum.index,
                    slots.len()
                )));
            }
            match dim {
                None => dim = Some(datum.embedding.len()),
                Some(d) if d != datum.embedding.len() => {
                    return Err(Error::Embed(format!(
                        "embedding dimension drift within batch: {d} vs {}",
                        datum.embedding.len()
                    )));
                }
                _ => {}
            }
            slots[datum.index] = Some(EmbeddingVector::normalized(&self.config.model, datum.embedding)?);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| Error::Embed(format!("missing embedding for batch index {i}")))
            })
            .collect()
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        if chunks.len() == 1 {
            return self.embed_one_batch(chunks[0]);
        }
        // Bounded fan-out over batches; slot order restores input order.
        let results: Vec<Mutex<Option<Result<Vec<EmbeddingVector>>>>> =
            chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..self.in_flight.min(chunks.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= chunks.len() {
                        break;
                    }
                    *results[i].lock().unwrap() = Some(self.embed_one_batch(chunks[i]));
                });
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for slot in results {
            out.extend(slot.into_inner().unwrap().expect("worker filled slot")?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Chat completions
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: String,
}

/// Remote chat-completions client with optional image attachment.
pub struct RemoteLmm {
    config: HttpConfig,
    /// Root for resolving relative image paths into data URLs.
    image_root: Option<PathBuf>,
    max_tokens: Option<u32>,
}

impl RemoteLmm {
    pub fn new(config: HttpConfig) -> Self {
        RemoteLmm { config, image_root: None, max_tokens: None }
    }

    pub fn with_image_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.image_root = Some(root.into());
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = Some(max_tokens);
        self
    }

    /// Turn an image reference into something the endpoint can fetch:
    /// http(s)/data URIs pass through, local paths become base64 data URLs.
    /// Bytes are forwarded opaquely — nothing is decoded here.
    fn resolve_image(&self, image_ref: &str) -> Result<String> {
        if image_ref.starts_with("http://")
            || image_ref.starts_with("https://")
            || image_ref.starts_with("data:")
        {
            return Ok(image_ref.to_string());
        }
        let path = match &self.image_root {
            Some(root) => root.join(image_ref),
            None => PathBuf::from(image_ref),
        };
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_lowercase) {
            Some(ext) if ext == "jpg" || ext == "jpeg" => "image/jpeg",
            Some(ext) if ext == "png" => "image/png",
            Some(ext) if ext == "gif" => "image/gif",
            Some(ext) if ext == "webp" => "image/webp",
            _ => "application/octet-stream",
        };
        Ok(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }
}

impl LmmProvider for RemoteLmm {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &LmmRequest) -> Result<String> {
        let mut content = vec![serde_json::json!({"type": "text", "text": request.prompt})];
        if let Some(image_ref) = &request.image_ref {
            let url = self.resolve_image(image_ref)?;
            content.push(serde_json::json!({"type": "image_url", "image_url": {"url": url}}));
        }
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
        });
        if let Some(max_tokens) = self.max_tokens {
            body["max_tokens"] = serde_json::json!(max_tokens);
        }
        let agent = agent(&self.config);
        let url = format!("{}/v1/chat/completions", self.config.base_url);
        let text = post_json_with_retry(&agent, &self.config, &url, &body)?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| provider_error(&self.config.model, format!("bad response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| provider_error(&self.config.model, "response had no choices"))?;
        Ok(choice.message.content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::RequestKind;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Minimal canned HTTP server: answers each incoming request with the
    /// next (status, body) pair, recording request bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(rest) = line.to_lowercase().strip_prefix("content-length:") {
                        content_length = rest.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut request_body = vec![0u8; content_length];
                reader.read_exact(&mut request_body).unwrap();
                bodies.push(String::from_utf8_lossy(&request_body).to_string());
                let mut stream = reader.into_inner();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}"), handle)
    }

    fn fast_config(base_url: &str) -> HttpConfig {
        let mut config = HttpConfig::new(base_url, "test-model", "IBSYNTH_TEST_KEY_UNSET");
        config.backoff_ms = 1;
        config
    }

    #[test]
    fn embeddings_round_trip_normalizes_and_orders() {
        let body = serde_json::json!({
            "data": [
                {"index": 1, "embedding": [0.0, 2.0]},
                {"index": 0, "embedding": [3.0, 0.0]},
            ]
        });
        let (url, handle) = serve(vec![(200, body.to_string())]);
        let embedder = RemoteEmbedder::new(fast_config(&url));
        let out = embedder
            .embed_batch(&["first".to_string(), "second".to_string()])
            .unwrap();
        handle.join().unwrap();
        assert_eq!(out[0].values, vec![1.0, 0.0], "index field restores order");
        assert_eq!(out[1].values, vec![0.0, 1.0], "vectors are L2-normalized on receipt");
        assert_eq!(out[0].model_id, "test-model");
    }

    #[test]
    fn embeddings_batch_shape_mismatch_errors() {
        let body = serde_json::json!({"data": [{"index": 0, "embedding": [1.0, 0.0]}]});
        let (url, handle) = serve(vec![(200, body.to_string())]);
        let embedder = RemoteEmbedder::new(fast_config(&url));
        let err = embedder
            .embed_batch(&["a".to_string(), "b".to_string(), "c".to_string()])
            .unwrap_err();
        handle.join().unwrap();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn transient_500_is_retried() {
        let ok = serde_json::json!({"data": [{"index": 0, "embedding": [1.0, 1.0]}]});
        let (url, handle) = serve(vec![
            (500, "{\"error\":\"overloaded\"}".to_string()),
            (200, ok.to_string()),
        ]);
        let embedder = RemoteEmbedder::new(fast_config(&url));
        let out = embedder.embed_batch(&["a".to_string()]).unwrap();
        handle.join().unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn chat_sends_image_part_and_parses_content() {
        let reply = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": "a small bird"}}]
        });
        let (url, handle) = serve(vec![(200, reply.to_string())]);
        let lmm = RemoteLmm::new(fast_config(&url));
        let out = lmm
            .complete(&LmmRequest {
                kind: RequestKind::Description,
                image_id: "img1".into(),
                image_ref: Some("https://example.test/img1.jpg".into()),
                prompt: "Please describe the image.".into(),
                temperature: 0.7,
                sample_index: 0,
                round: 0,
            })
            .unwrap();
        let bodies = handle.join().unwrap();
        assert_eq!(out, "a small bird");
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "test-model");
        let content = &sent["messages"][0]["content"];
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[1]["type"], "image_url");
        assert_eq!(content[1]["image_url"]["url"], "https://example.test/img1.jpg");
    }

    #[test]
    fn local_image_paths_become_data_urls() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.png"), [1u8, 2, 3]).unwrap();
        let lmm = RemoteLmm::new(fast_config("http://unused")).with_image_root(dir.path());
        let url = lmm.resolve_image("x.png").unwrap();
        assert!(url.starts_with("data:image/png;base64,"), "{url}");
    }

    #[test]
    fn client_errors_fail_fast() {
        let (url, handle) = serve(vec![(400, "{\"error\":\"bad request\"}".to_string())]);
        let embedder = RemoteEmbedder::new(fast_config(&url));
        let err = embedder.embed_batch(&["a".to_string()]).unwrap_err();
        handle.join().unwrap();
        assert!(err.to_string().contains("not retryable"), "{err}");
    }
}
