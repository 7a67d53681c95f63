//! Scripted mock provider for offline runs and tests.
//!
//! A script is a JSONL file of rules. Each rule lists matchers (all present
//! fields must match) and either a response template or `"fail": true` to
//! simulate a provider outage. The first matching rule wins; with no match,
//! an optional fallback template answers, otherwise the request errors.
//!
//! Response templates may use `{image_id}`, `{sample_index}`, `{round}`,
//! `{kind}`, and `{prompt}` placeholders.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::{provider_error, LmmProvider, LmmRequest, RequestKind};
use crate::util::read_to_string;

/// One scripted rule.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RequestKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fail: bool,
}

impl MockRule {
    fn matches(&self, request: &LmmRequest) -> bool {
        if let Some(kind) = self.kind {
            if kind != request.kind {
                return false;
            }
        }
        if let Some(id) = &self.image_id {
            if id != &request.image_id {
                return false;
            }
        }
        if let Some(idx) = self.sample_index {
            if idx != request.sample_index {
                return false;
            }
        }
        if let Some(round) = self.round {
            if round != request.round {
                return false;
            }
        }
        if let Some(needle) = &self.prompt_contains {
            if !request.prompt.contains(needle.as_str()) {
                return false;
            }
        }
        true
    }
}

fn render(template: &str, request: &LmmRequest) -> String {
    let kind = match request.kind {
        RequestKind::Description => "description",
        RequestKind::Candidate => "candidate",
        RequestKind::Rewrite => "rewrite",
        RequestKind::Judge => "judge",
    };
    template
        .replace("{image_id}", &request.image_id)
        .replace("{sample_index}", &request.sample_index.to_string())
        .replace("{round}", &request.round.to_string())
        .replace("{kind}", kind)
        .replace("{prompt}", &request.prompt)
}

/// Deterministic scripted provider. Counts inner calls so tests can assert
/// that reruns replay from the cache.
pub struct MockLmm {
    model_id: String,
    rules: Vec<MockRule>,
    fallback_template: Option<String>,
    calls: AtomicUsize,
}

impl MockLmm {
    pub fn new(model_id: &str, rules: Vec<MockRule>) -> Self {
        MockLmm {
            model_id: model_id.to_string(),
            rules,
            fallback_template: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// Load rules from a JSONL script file.
    pub fn from_script(model_id: &str, path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut rules = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rule: MockRule = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            if !rule.fail && rule.response.is_none() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: "rule needs either a response or fail:true".into(),
                });
            }
            rules.push(rule);
        }
        Ok(MockLmm::new(model_id, rules))
    }

    /// Answer unmatched requests with this template instead of erroring.
    pub fn with_fallback_template(mut self, template: &str) -> Self {
        self.fallback_template = Some(template.to_string());
        self
    }

    /// How many requests reached this provider (cache misses only, when
    /// wrapped in the caching layer).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LmmProvider for MockLmm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &LmmRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        for rule in &self.rules {
            if rule.matches(request) {
                if rule.fail {
                    return Err(provider_error(&self.model_id, "scripted failure"));
                }
                let template = rule.response.as_deref().unwrap_or_default();
                return Ok(render(template, request));
            }
        }
        if let Some(template) = &self.fallback_template {
            return Ok(render(template, request));
        }
        Err(provider_error(
            &self.model_id,
            format!(
                "no scripted response for kind={:?} image_id={} sample={} round={}",
                request.kind, request.image_id, request.sample_index, request.round
            ),
        ))
    }
}
