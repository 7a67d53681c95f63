//! Orchestration: the iterative synthesis loop over a manifest of images.
//!
//! Round 0 samples descriptions, scores and selects concepts, and rewrites
//! them into grounded answers. Every later round asks that round's
//! externally fine-tuned model for candidate answers, scores them against
//! the selected concepts, and keeps the best label-bearing one. Each round
//! appends to a cumulative training set; a fingerprinted ledger records
//! what happened to every image and pins the run directory to one
//! configuration.

pub mod config;
pub mod ledger;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::answers::{
    generate_candidates, rewrite_answer, score_candidates, select_best_answer, CandidateAnswer,
    FilterDecision,
};
use crate::cache::FileCache;
use crate::corpus::{
    load_concept_sets, load_manifest, load_training_examples, ConceptSets, ImageRecord,
    TrainingExample,
};
use crate::describe::{generate_descriptions, DescriptionSet};
use crate::embed::{CachingEmbedder, DeterministicEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::prompts::{PromptBank, QueryBank};
use crate::providers::openai::{HttpConfig, RemoteEmbedder, RemoteLmm, EMBED_API_KEY_ENV, LMM_API_KEY_ENV};
use crate::providers::{mock::MockLmm, CachingLmm, LmmProvider, LmmRequest};
use crate::selection::{score_all_concepts, select_concepts, NegativePool, SelectionResult};
use crate::util::{parallel_map, read_to_string, write_atomic};

pub use config::{ConfigOverrides, EmbeddingSpec, ProviderSpec, RoundModel, RunConfig};
pub use ledger::{ImageStatus, Ledger, RoundLedger, StatusCounts};

/// One turn of the emitted conversation format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub from: String,
    pub value: String,
}

/// One line of the emitted fine-tuning file. Field order is the wire
/// format: id, image, conversations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub image: String,
    pub conversations: Vec<ConversationTurn>,
}

/// What one round did, for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: u32,
    pub counts: StatusCounts,
    /// Rows this round added.
    pub rows_appended: usize,
    /// Rows in the round's cumulative dataset.
    pub cumulative_rows: usize,
    /// Generation requests that actually reached the provider (cache
    /// misses); zero on a clean rerun.
    pub provider_calls: usize,
    pub train_path: PathBuf,
}

/// Counts provider traffic passing through the cache wrapper.
struct CountingLmm {
    inner: Box<dyn LmmProvider>,
    calls: Arc<AtomicUsize>,
}

impl LmmProvider for CountingLmm {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn complete(&self, request: &LmmRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

/// A loaded, validated run: manifest, concept sets, banks, and the
/// embedding backend, ready to execute rounds.
pub struct Pipeline {
    config: RunConfig,
    records: Vec<ImageRecord>,
    concepts: ConceptSets,
    prompt_bank: PromptBank,
    query_bank: QueryBank,
    embedder: Box<dyn TextEmbedder>,
    fingerprint: String,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Pipeline> {
        let records = load_manifest(&config.manifest)?;
        if records.is_empty() {
            return Err(Error::Validation(format!(
                "manifest {} has no images",
                config.manifest.display()
            )));
        }
        let concepts = load_concept_sets(&config.concepts)?;
        for record in &records {
            // Fail fast: a label without a concept set can never be scored.
            concepts.get(&record.label)?;
        }
        let prompt_bank = match &config.prompts {
            Some(path) => PromptBank::load(path)?,
            None => PromptBank::builtin(config.family)?,
        };
        let query_bank = match &config.queries {
            Some(path) => QueryBank::load(path)?,
            None => QueryBank::builtin()?,
        };
        let embedder = Self::build_embedder(&config)?;
        let fingerprint = config.fingerprint();
        Ok(Pipeline { config, records, concepts, prompt_bank, query_bank, embedder, fingerprint })
    }

    fn build_embedder(config: &RunConfig) -> Result<Box<dyn TextEmbedder>> {
        Ok(match &config.embedding {
            // The deterministic embedder is a pure function; caching it
            // would only add disk traffic.
            EmbeddingSpec::Deterministic { dim } => Box::new(DeterministicEmbedder::new(*dim)?),
            EmbeddingSpec::Remote { base_url, model } => {
                let remote = RemoteEmbedder::new(HttpConfig::new(base_url, model, EMBED_API_KEY_ENV));
                Box::new(CachingEmbedder::new(remote, FileCache::new(config.cache_root())))
            }
        })
    }

    /// The generation provider for one round, cache-wrapped and counted.
    fn lmm_for_round(
        &self,
        round: u32,
    ) -> Result<(CachingLmm<CountingLmm>, Arc<AtomicUsize>)> {
        let spec = self.config.provider_for_round(round)?;
        let inner: Box<dyn LmmProvider> = match spec {
            ProviderSpec::Remote { base_url, model } => Box::new(
                RemoteLmm::new(HttpConfig::new(base_url, model, LMM_API_KEY_ENV))
                    .with_image_root(self.image_root()),
            ),
            // Distinct per-round mock identities keep each round's cache
            // namespace separate, mirroring distinct fine-tuned checkpoints.
            ProviderSpec::Mock { script } => {
                Box::new(MockLmm::from_script(&format!("mock-r{round}"), script)?)
            }
        };
        let calls = Arc::new(AtomicUsize::new(0));
        let counting = CountingLmm { inner, calls: calls.clone() };
        Ok((CachingLmm::new(counting, FileCache::new(self.config.cache_root())), calls))
    }

    /// The judge provider for evaluation, uncached by design.
    pub fn judge(&self) -> Result<Box<dyn LmmProvider>> {
        let spec = self
            .config
            .judge
            .as_ref()
            .ok_or_else(|| Error::Config("no judge provider configured".into()))?;
        Ok(match spec {
            ProviderSpec::Remote { base_url, model } => Box::new(
                RemoteLmm::new(HttpConfig::new(base_url, model, LMM_API_KEY_ENV))
                    .with_image_root(self.image_root()),
            ),
            ProviderSpec::Mock { script } => Box::new(MockLmm::from_script("judge", script)?),
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn concepts(&self) -> &ConceptSets {
        &self.concepts
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Relative image refs resolve against the manifest's directory.
    fn image_root(&self) -> PathBuf {
        self.config
            .manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }

    fn descriptions_dir(&self) -> PathBuf {
        self.config.output_root.join("descriptions")
    }

    fn selection_dir(&self) -> PathBuf {
        self.config.output_root.join("selection")
    }

    fn round_dir(&self, round: u32) -> PathBuf {
        self.config.output_root.join("rounds").join(round.to_string())
    }

    fn ledger_path(&self) -> PathBuf {
        self.config.output_root.join("ledger.jsonl")
    }

    fn load_ledger(&self) -> Result<Ledger> {
        Ledger::load_guarded(&self.ledger_path(), &self.fingerprint, self.config.policy.as_str())
    }

    /// The deterministic query for one image.
    pub fn query_for(&self, record: &ImageRecord) -> String {
        self.query_bank.assign(&record.id).render(&record.coarse_label)
    }

    // -- stages ------------------------------------------------------------

    /// Sample descriptions for every image. Per-image failures are logged
    /// and surface as `None`; artifacts land in `descriptions/`.
    fn describe_stage(&self, lmm: &dyn LmmProvider) -> Result<Vec<Option<DescriptionSet>>> {
        let items: Vec<&ImageRecord> = self.records.iter().collect();
        let outcomes = parallel_map(items, self.config.workers, |record| {
            generate_descriptions(
                record,
                &self.prompt_bank,
                self.config.descriptions,
                self.config.description_temperature,
                lmm,
            )
        });

        let dir = self.descriptions_dir();
        let mut described = Vec::with_capacity(self.records.len());
        for (record, outcome) in self.records.iter().zip(outcomes) {
            match outcome {
                Ok((set, report)) => {
                    let lines: Vec<String> = set
                        .entries
                        .iter()
                        .map(|e| serde_json::to_string(e).expect("entry serializes"))
                        .collect();
                    write_jsonl(&dir.join(format!("{}.jsonl", record.id)), &lines)?;
                    let report_json =
                        serde_json::to_string_pretty(&report).expect("report serializes");
                    write_atomic(
                        &dir.join(format!("{}.report.json", record.id)),
                        format!("{report_json}\n").as_bytes(),
                    )?;
                    if report.low_diversity {
                        log::warn!(
                            "descriptions for {} are low-diversity ({}/{} unique)",
                            record.id,
                            report.unique,
                            report.collected
                        );
                    }
                    described.push(Some(set));
                }
                Err(err) => {
                    log::warn!("descriptions failed for {}: {err}", record.id);
                    described.push(None);
                }
            }
        }
        Ok(described)
    }

    /// Score and select concepts for every described image. Negatives are
    /// drawn from the other images' descriptions; artifacts land in
    /// `selection/`.
    fn selection_stage(
        &self,
        described: &[Option<DescriptionSet>],
    ) -> Result<Vec<Option<SelectionResult>>> {
        // The shared negative-candidate list: every successfully described
        // image's descriptions, in manifest order.
        let mut all_texts: Vec<(String, String)> = Vec::new();
        for (record, set) in self.records.iter().zip(described) {
            if let Some(set) = set {
                for text in set.texts() {
                    all_texts.push((record.id.clone(), text));
                }
            }
        }

        let items: Vec<(usize, &ImageRecord, &DescriptionSet)> = self
            .records
            .iter()
            .enumerate()
            .filter_map(|(i, record)| described[i].as_ref().map(|set| (i, record, set)))
            .collect();
        let outcomes = parallel_map(items.clone(), self.config.workers, |(_, record, set)| {
            let candidates: Vec<(String, String)> = all_texts
                .iter()
                .filter(|(source, _)| source != &record.id)
                .cloned()
                .collect();
            let pool = NegativePool::sample(
                &record.id,
                &candidates,
                self.config.negatives,
                self.config.seed,
                self.embedder.as_ref(),
            )?;
            let concept_set = self.concepts.get(&record.label)?;
            let scored = score_all_concepts(
                &set.texts(),
                concept_set,
                &pool,
                self.config.tau,
                self.embedder.as_ref(),
            )?;
            let selection = select_concepts(&scored, self.config.beta)?;
            Ok(SelectionResult::new(
                &record.id,
                scored,
                selection,
                self.config.tau,
                pool.sampling_seed,
            ))
        });

        let dir = self.selection_dir();
        let mut by_index: Vec<Option<SelectionResult>> = vec![None; self.records.len()];
        for ((i, record, _), outcome) in items.iter().zip(outcomes) {
            match outcome {
                Ok(result) => {
                    let json = serde_json::to_string_pretty(&result).expect("result serializes");
                    write_atomic(
                        &dir.join(format!("{}.json", record.id)),
                        format!("{json}\n").as_bytes(),
                    )?;
                    by_index[*i] = Some(result);
                }
                Err(err) => {
                    log::warn!("concept selection failed for {}: {err}", record.id);
                }
            }
        }
        Ok(by_index)
    }

    /// Load a previously computed selection from disk, if present.
    fn load_selection(&self, record: &ImageRecord) -> Result<Option<SelectionResult>> {
        let path = self.selection_dir().join(format!("{}.json", record.id));
        if !path.exists() {
            return Ok(None);
        }
        let text = read_to_string(&path)?;
        let result: SelectionResult = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        Ok(Some(result))
    }

    // -- rounds ------------------------------------------------------------

    /// Round 0: descriptions, concept selection, and rewrite answers for
    /// every image; writes the initial training set and the ledger.
    pub fn build_round0(&self) -> Result<RoundSummary> {
        let mut ledger = self.load_ledger()?;
        let (lmm, calls) = self.lmm_for_round(0)?;

        let described = self.describe_stage(&lmm)?;
        let selections = self.selection_stage(&described)?;

        let items: Vec<(&ImageRecord, &SelectionResult)> = self
            .records
            .iter()
            .zip(&selections)
            .filter_map(|(record, sel)| sel.as_ref().map(|s| (record, s)))
            .collect();
        let outcomes = parallel_map(items.clone(), self.config.workers, |(record, selection)| {
            let query = self.query_for(record);
            rewrite_answer(
                record,
                selection,
                &query,
                self.config.family,
                self.config.rewrite_temperature,
                &lmm,
            )
        });

        let mut rewritten: std::collections::BTreeMap<&str, _> = std::collections::BTreeMap::new();
        for ((record, _), outcome) in items.iter().zip(outcomes) {
            rewritten.insert(record.id.as_str(), outcome);
        }

        let mut rows: Vec<TrainingExample> = Vec::new();
        let mut statuses: Vec<(String, ImageStatus)> = Vec::new();
        for record in &self.records {
            let status = match rewritten.remove(record.id.as_str()) {
                Some(Ok(output)) => {
                    let status = if output.used_fallback {
                        ImageStatus::Fallback
                    } else {
                        ImageStatus::Emitted
                    };
                    rows.push(output.example);
                    status
                }
                Some(Err(err)) => {
                    log::warn!("rewrite failed for {}: {err}", record.id);
                    ImageStatus::ProviderShortfall
                }
                None => ImageStatus::ProviderShortfall,
            };
            statuses.push((record.id.clone(), status));
        }

        let train_path = self.round_dir(0).join("train.jsonl");
        let lines: Vec<String> =
            rows.iter().map(|r| serde_json::to_string(r).expect("row serializes")).collect();
        write_jsonl(&train_path, &lines)?;

        let block = RoundLedger::new(0, statuses);
        let counts = block.counts;
        ledger.record_round(block);
        ledger.write(&self.ledger_path())?;

        Ok(RoundSummary {
            round: 0,
            counts,
            rows_appended: rows.len(),
            cumulative_rows: rows.len(),
            provider_calls: calls.load(Ordering::SeqCst),
            train_path,
        })
    }

    /// Round T >= 1: candidate answers from that round's model, scored
    /// against the stored concept selections, best label-bearing answer
    /// kept; appends to the cumulative training set.
    pub fn run_round(&self, round: u32) -> Result<RoundSummary> {
        if round == 0 {
            return self.build_round0();
        }
        if round >= self.config.rounds {
            return Err(Error::Config(format!(
                "round {round} is out of range: the run is configured for rounds 0..{}",
                self.config.rounds
            )));
        }
        let mut ledger = self.load_ledger()?;
        ledger.require_rounds_before(round)?;
        let prior = read_to_string(&self.round_dir(round - 1).join("train.jsonl"))?;
        let (lmm, calls) = self.lmm_for_round(round)?;

        let mut selections: Vec<Option<SelectionResult>> = Vec::with_capacity(self.records.len());
        for record in &self.records {
            selections.push(self.load_selection(record)?);
        }

        let items: Vec<(&ImageRecord, &SelectionResult)> = self
            .records
            .iter()
            .zip(&selections)
            .filter_map(|(record, sel)| sel.as_ref().map(|s| (record, s)))
            .collect();
        let outcomes = parallel_map(items.clone(), self.config.workers, |(record, selection)| {
            let query = self.query_for(record);
            let mut candidates = generate_candidates(
                record,
                &query,
                self.config.candidates,
                round,
                self.config.candidate_temperature,
                &lmm,
            )?;
            score_candidates(&mut candidates, selection, selection.tau, self.embedder.as_ref())?;
            let decision =
                select_best_answer(&record.id, &candidates, &record.label, self.config.policy)?;
            Ok((candidates, decision))
        });

        let mut filtered: std::collections::BTreeMap<&str, _> = std::collections::BTreeMap::new();
        for ((record, _), outcome) in items.iter().zip(outcomes) {
            filtered.insert(record.id.as_str(), outcome);
        }

        let round_dir = self.round_dir(round);
        let candidates_dir = round_dir.join("candidates");
        let mut rows: Vec<TrainingExample> = Vec::new();
        let mut decisions: Vec<FilterDecision> = Vec::new();
        let mut statuses: Vec<(String, ImageStatus)> = Vec::new();
        for record in &self.records {
            let status = match filtered.remove(record.id.as_str()) {
                Some(Ok((candidates, decision))) => {
                    let candidates: Vec<CandidateAnswer> = candidates;
                    let lines: Vec<String> = candidates
                        .iter()
                        .map(|c| serde_json::to_string(c).expect("candidate serializes"))
                        .collect();
                    write_jsonl(&candidates_dir.join(format!("{}.jsonl", record.id)), &lines)?;
                    let status = match &decision.chosen {
                        Some(chosen) => {
                            rows.push(TrainingExample {
                                image_id: record.id.clone(),
                                image_ref: record.image_ref.clone(),
                                query: self.query_for(record),
                                answer: chosen.text.clone(),
                                round,
                                source: crate::corpus::ExampleSource::RejectionSampling,
                            });
                            ImageStatus::Emitted
                        }
                        None => ImageStatus::Discarded,
                    };
                    decisions.push(decision);
                    status
                }
                Some(Err(err)) => {
                    log::warn!("candidate sampling failed for {}: {err}", record.id);
                    ImageStatus::ProviderShortfall
                }
                None => ImageStatus::ProviderShortfall,
            };
            statuses.push((record.id.clone(), status));
        }

        let decision_lines: Vec<String> = decisions
            .iter()
            .map(|d| serde_json::to_string(d).expect("decision serializes"))
            .collect();
        write_jsonl(&round_dir.join("decisions.jsonl"), &decision_lines)?;

        let new_lines: Vec<String> =
            rows.iter().map(|r| serde_json::to_string(r).expect("row serializes")).collect();
        let mut cumulative = prior;
        for line in &new_lines {
            cumulative.push_str(line);
            cumulative.push('\n');
        }
        let train_path = round_dir.join("train.jsonl");
        write_atomic(&train_path, cumulative.as_bytes())?;

        let block = RoundLedger::new(round, statuses);
        let counts = block.counts;
        ledger.record_round(block);
        ledger.write(&self.ledger_path())?;

        Ok(RoundSummary {
            round,
            counts,
            rows_appended: rows.len(),
            cumulative_rows: cumulative.lines().count(),
            provider_calls: calls.load(Ordering::SeqCst),
            train_path,
        })
    }

    /// Run only the description stage (the `describe` subcommand).
    pub fn describe_only(&self) -> Result<StatusCounts> {
        let (lmm, _) = self.lmm_for_round(0)?;
        let described = self.describe_stage(&lmm)?;
        let mut counts = StatusCounts::default();
        for set in &described {
            match set {
                Some(_) => counts.emitted += 1,
                None => counts.provider_shortfall += 1,
            }
        }
        Ok(counts)
    }

    /// Run descriptions plus concept scoring/selection (the
    /// `score-concepts` subcommand).
    pub fn score_concepts_only(&self) -> Result<StatusCounts> {
        let (lmm, _) = self.lmm_for_round(0)?;
        let described = self.describe_stage(&lmm)?;
        let selections = self.selection_stage(&described)?;
        let mut counts = StatusCounts::default();
        for selection in &selections {
            match selection {
                Some(_) => counts.emitted += 1,
                None => counts.provider_shortfall += 1,
            }
        }
        Ok(counts)
    }

    /// Serialize a round's cumulative dataset into the conversations wire
    /// format; `mix_with` lines are passed through verbatim at the end.
    pub fn emit_conversations(
        &self,
        round: u32,
        mix_with: Option<&Path>,
    ) -> Result<PathBuf> {
        let train_path = self.round_dir(round).join("train.jsonl");
        if !train_path.exists() {
            return Err(Error::Config(format!(
                "no dataset for round {round}; run `synthesize --round {round}` first"
            )));
        }
        let examples = load_training_examples(&train_path)?;
        let mut lines: Vec<String> = Vec::with_capacity(examples.len());
        for example in &examples {
            let record = ConversationRecord {
                id: format!("{}-r{}", example.image_id, example.round),
                image: example.image_ref.clone(),
                conversations: vec![
                    ConversationTurn {
                        from: "human".into(),
                        value: format!("<image>\n{}", example.query),
                    },
                    ConversationTurn { from: "gpt".into(), value: example.answer.clone() },
                ],
            };
            lines.push(serde_json::to_string(&record).expect("record serializes"));
        }
        if let Some(path) = mix_with {
            for line in read_to_string(path)?.lines() {
                if !line.trim().is_empty() {
                    lines.push(line.to_string());
                }
            }
        }
        let out_path = self.round_dir(round).join("conversations.jsonl");
        write_jsonl(&out_path, &lines)?;
        Ok(out_path)
    }
}

/// Write a JSONL file atomically: one line per entry, trailing newline,
/// empty file for zero entries.
fn write_jsonl(path: &Path, lines: &[String]) -> Result<()> {
    let text = if lines.is_empty() { String::new() } else { format!("{}\n", lines.join("\n")) };
    write_atomic(path, text.as_bytes())
}
