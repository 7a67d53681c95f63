//! Run configuration: the TOML file that names every input, knob, and
//! provider for a synthesis run, plus the fingerprint that pins a run
//! directory to one configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::answers::DiscardPolicy;
use crate::error::{Error, Result};
use crate::prompts::DatasetFamily;
use crate::util::{content_hash, read_to_string};

/// A chat/vision generation backend: an OpenAI-compatible endpoint or a
/// scripted mock for offline runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    Remote { base_url: String, model: String },
    Mock { script: PathBuf },
}

/// Where embeddings come from: the built-in deterministic embedder (fully
/// offline) or an OpenAI-compatible embeddings endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSpec {
    Deterministic {
        #[serde(default = "default_embed_dim")]
        dim: usize,
    },
    Remote { base_url: String, model: String },
}

fn default_embed_dim() -> usize {
    256
}

/// A generation endpoint for one specific round (the externally fine-tuned
/// model f after that round of training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundModel {
    pub round: u32,
    #[serde(flatten)]
    pub provider: ProviderSpec,
}

/// Everything a run needs: inputs, numeric knobs, providers, output layout.
/// Loaded from `run.toml`; CLI flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Image manifest (JSONL).
    pub manifest: PathBuf,
    /// Label -> concept strings map (JSON).
    pub concepts: PathBuf,
    /// Directory all outputs go under.
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    /// Provider-response cache location; defaults to `<output_root>/cache`.
    #[serde(default)]
    pub cache_root: Option<PathBuf>,
    /// Dataset family: picks the prompt bank and rewrite template.
    #[serde(default)]
    pub family: DatasetFamily,
    /// Override the built-in description prompt bank (JSON file).
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    /// Override the built-in query template bank (JSON file).
    #[serde(default)]
    pub queries: Option<PathBuf>,

    /// Descriptions sampled per image (n).
    #[serde(default = "default_descriptions")]
    pub descriptions: usize,
    /// Candidate answers sampled per image per round (m).
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    /// Contrastive temperature for all scoring.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Selection threshold multiplier: keep concepts above mean + beta * sd.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Negative descriptions sampled per image (K).
    #[serde(default = "default_negatives")]
    pub negatives: usize,
    /// Total rounds the run is configured for; valid round indices are
    /// 0..rounds, with round 0 the rewrite round.
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_policy")]
    pub policy: DiscardPolicy,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads for per-image stages.
    #[serde(default = "default_workers")]
    pub workers: usize,

    #[serde(default = "default_description_temperature")]
    pub description_temperature: f64,
    #[serde(default = "default_candidate_temperature")]
    pub candidate_temperature: f64,
    #[serde(default = "default_rewrite_temperature")]
    pub rewrite_temperature: f64,

    #[serde(default = "default_embedding")]
    pub embedding: EmbeddingSpec,
    /// Base model: descriptions and round-0 rewrites.
    #[serde(default)]
    pub base_model: Option<ProviderSpec>,
    /// Fine-tuned per-round endpoints, one per round >= 1.
    #[serde(default)]
    pub round_models: Vec<RoundModel>,
    /// Judge endpoint for the evaluation metrics.
    #[serde(default)]
    pub judge: Option<ProviderSpec>,
}

fn default_output_root() -> PathBuf {
    PathBuf::from("out")
}
fn default_descriptions() -> usize {
    25
}
fn default_candidates() -> usize {
    8
}
fn default_tau() -> f64 {
    0.07
}
fn default_beta() -> f64 {
    1.0
}
fn default_negatives() -> usize {
    8
}
fn default_rounds() -> u32 {
    1
}
fn default_policy() -> DiscardPolicy {
    DiscardPolicy::PaperLiteral
}
fn default_seed() -> u64 {
    17
}
fn default_workers() -> usize {
    4
}
fn default_description_temperature() -> f64 {
    0.7
}
fn default_candidate_temperature() -> f64 {
    0.9
}
fn default_rewrite_temperature() -> f64 {
    0.0
}
fn default_embedding() -> EmbeddingSpec {
    EmbeddingSpec::Deterministic { dim: default_embed_dim() }
}

/// CLI-level overrides applied on top of the loaded file.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub descriptions: Option<usize>,
    pub candidates: Option<usize>,
    pub negatives: Option<usize>,
    pub rounds: Option<u32>,
    pub policy: Option<String>,
    pub seed: Option<u64>,
    /// Replace every generation provider (base, all rounds, judge) with the
    /// scripted mock at this path.
    pub mock_lmm: Option<PathBuf>,
}

impl RunConfig {
    /// Load a config file, resolve its relative paths against the file's
    /// directory, apply overrides, and validate.
    pub fn load(path: &Path, overrides: &ConfigOverrides) -> Result<RunConfig> {
        let text = read_to_string(path)?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.apply(overrides)?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.manifest);
        resolve(&mut self.concepts);
        resolve(&mut self.output_root);
        if let Some(p) = self.cache_root.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.prompts.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.queries.as_mut() {
            resolve(p);
        }
        let resolve_provider = |spec: &mut ProviderSpec| {
            if let ProviderSpec::Mock { script } = spec {
                resolve(script);
            }
        };
        if let Some(spec) = self.base_model.as_mut() {
            resolve_provider(spec);
        }
        for rm in self.round_models.iter_mut() {
            resolve_provider(&mut rm.provider);
        }
        if let Some(spec) = self.judge.as_mut() {
            resolve_provider(spec);
        }
    }

    fn apply(&mut self, overrides: &ConfigOverrides) -> Result<()> {
        if let Some(v) = overrides.beta {
            self.beta = v;
        }
        if let Some(v) = overrides.tau {
            self.tau = v;
        }
        if let Some(v) = overrides.descriptions {
            self.descriptions = v;
        }
        if let Some(v) = overrides.candidates {
            self.candidates = v;
        }
        if let Some(v) = overrides.negatives {
            self.negatives = v;
        }
        if let Some(v) = overrides.rounds {
            self.rounds = v;
        }
        if let Some(p) = overrides.policy.as_deref() {
            self.policy = DiscardPolicy::parse(p)?;
        }
        if let Some(v) = overrides.seed {
            self.seed = v;
        }
        if let Some(script) = overrides.mock_lmm.as_ref() {
            let mock = ProviderSpec::Mock { script: script.clone() };
            self.base_model = Some(mock.clone());
            self.round_models = (1..self.rounds)
                .map(|round| RoundModel { round, provider: mock.clone() })
                .collect();
            self.judge = Some(mock);
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.descriptions < 1 {
            return bad("descriptions must be at least 1".into());
        }
        if self.candidates < 1 {
            return bad("candidates must be at least 1".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive and finite, got {}", self.tau));
        }
        if !self.beta.is_finite() {
            return bad(format!("beta must be finite, got {}", self.beta));
        }
        if self.negatives < 1 {
            return bad("negatives must be at least 1".into());
        }
        if self.workers < 1 {
            return bad("workers must be at least 1".into());
        }
        if !(self.description_temperature.is_finite() && self.description_temperature > 0.0) {
            return bad("description_temperature must be positive".into());
        }
        if !(self.candidate_temperature.is_finite() && self.candidate_temperature > 0.0) {
            return bad("candidate_temperature must be positive".into());
        }
        if !(self.rewrite_temperature.is_finite() && self.rewrite_temperature >= 0.0) {
            return bad("rewrite_temperature must be non-negative".into());
        }
        if let EmbeddingSpec::Deterministic { dim } = self.embedding {
            if dim < crate::embed::MIN_DETERMINISTIC_DIM {
                return bad(format!(
                    "embedding dim must be at least {}, got {dim}",
                    crate::embed::MIN_DETERMINISTIC_DIM
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for rm in &self.round_models {
            if rm.round == 0 {
                return bad("round_models are for rounds >= 1; round 0 uses base_model".into());
            }
            if !seen.insert(rm.round) {
                return bad(format!("duplicate round_models entry for round {}", rm.round));
            }
        }
        Ok(())
    }

    /// Cache directory, defaulting to `<output_root>/cache`.
    pub fn cache_root(&self) -> PathBuf {
        self.cache_root.clone().unwrap_or_else(|| self.output_root.join("cache"))
    }

    /// The provider for a round's generation traffic: round 0 is the base
    /// model, later rounds must name an endpoint explicitly (the fine-tuned
    /// model only exists after external training).
    pub fn provider_for_round(&self, round: u32) -> Result<&ProviderSpec> {
        if round == 0 {
            return self.base_model.as_ref().ok_or_else(|| {
                Error::Config("no base_model configured (and no --mock-lmm given)".into())
            });
        }
        self.round_models
            .iter()
            .find(|rm| rm.round == round)
            .map(|rm| &rm.provider)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no model endpoint configured for round {round}; \
                     add a [[round_models]] entry once that round's model is trained"
                ))
            })
    }

    /// Identity of this run for the ledger guard. Two configs that could
    /// produce different data must fingerprint differently; output location
    /// and worker count are excluded because they do not affect content.
    pub fn fingerprint(&self) -> String {
        fn json<T: serde::Serialize>(v: &T) -> String {
            serde_json::to_string(v).expect("config fields serialize")
        }
        // Field order is fixed; values use their full-precision debug form.
        let parts: Vec<String> = vec![
            format!("manifest={}", self.manifest.display()),
            format!("concepts={}", self.concepts.display()),
            format!("family={:?}", self.family),
            format!("prompts={:?}", self.prompts),
            format!("queries={:?}", self.queries),
            format!("descriptions={}", self.descriptions),
            format!("candidates={}", self.candidates),
            format!("tau={:?}", self.tau),
            format!("beta={:?}", self.beta),
            format!("negatives={}", self.negatives),
            format!("rounds={}", self.rounds),
            format!("policy={}", self.policy.as_str()),
            format!("seed={}", self.seed),
            format!("description_temperature={:?}", self.description_temperature),
            format!("candidate_temperature={:?}", self.candidate_temperature),
            format!("rewrite_temperature={:?}", self.rewrite_temperature),
            format!("embedding={}", json(&self.embedding)),
            format!("base_model={}", json(&self.base_model)),
            format!("round_models={}", json(&self.round_models)),
            format!("judge={}", json(&self.judge)),
        ];
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        content_hash(&refs)
    }
}
