//! Description sampling: n diverse descriptions per image, cycling the
//! dataset family's prompt bank.

use serde::{Deserialize, Serialize};

use crate::corpus::ImageRecord;
use crate::error::{Error, Result};
use crate::prompts::PromptBank;
use crate::providers::{LmmProvider, LmmRequest, RequestKind};

/// One sampled description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionEntry {
    pub prompt_id: String,
    pub sample_index: u32,
    pub text: String,
}

/// All descriptions collected for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionSet {
    pub image_id: String,
    pub entries: Vec<DescriptionEntry>,
    pub provider_id: String,
}

impl DescriptionSet {
    pub fn texts(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.text.clone()).collect()
    }
}

/// What happened while collecting: how many samples failed, and whether the
/// surviving texts are suspiciously repetitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionReport {
    pub requested: usize,
    pub collected: usize,
    pub unique: usize,
    /// Provider calls that failed permanently (after the provider's own
    /// retries); the set is partial when this is nonzero.
    pub failed: usize,
    /// True when fewer than half the collected texts are unique — a signal
    /// that the provider is not actually sampling.
    pub low_diversity: bool,
}

/// Ratio of unique texts below which a description set is flagged.
const LOW_DIVERSITY_THRESHOLD: f64 = 0.5;

/// Sample `n` descriptions for one image, cycling through the prompt bank
/// (sample i uses prompt i mod |bank|). Exact duplicate texts are resampled
/// with fresh sample indices up to a retry budget of `n` extra calls, then
/// kept as-is. Individual provider failures shrink the set rather than
/// failing the image; only a fully empty result is an error for the caller
/// to isolate.
pub fn generate_descriptions(
    record: &ImageRecord,
    bank: &PromptBank,
    n: usize,
    temperature: f64,
    lmm: &dyn LmmProvider,
) -> Result<(DescriptionSet, DescriptionReport)> {
    if n == 0 {
        return Err(Error::Validation("description count must be at least 1".into()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Validation(format!(
            "sampling temperature must be positive, got {temperature}"
        )));
    }

    let request_for = |prompt_idx: usize, sample_index: u32| LmmRequest {
        kind: RequestKind::Description,
        image_id: record.id.clone(),
        image_ref: Some(record.image_ref.clone()),
        prompt: bank.prompts[prompt_idx].template.clone(),
        temperature,
        sample_index,
        round: 0,
    };

    let mut entries: Vec<DescriptionEntry> = Vec::with_capacity(n);
    let mut failed = 0usize;
    for i in 0..n {
        let prompt_idx = i % bank.prompts.len();
        match lmm.complete(&request_for(prompt_idx, i as u32)) {
            Ok(text) if !text.trim().is_empty() => entries.push(DescriptionEntry {
                prompt_id: bank.prompts[prompt_idx].prompt_id.clone(),
                sample_index: i as u32,
                text,
            }),
            Ok(_) => failed += 1,
            Err(e) => {
                log::warn!("description sample {i} for image {} failed: {e}", record.id);
                failed += 1;
            }
        }
    }

    // Resample exact duplicates (trimmed text match) with fresh sample
    // indices so the cache treats them as new draws. Budget: n extra calls.
    let mut next_sample = n as u32;
    let budget_end = (n as u32) * 2;
    while let Some(dup_pos) = first_duplicate(&entries) {
        if next_sample >= budget_end {
            break;
        }
        let prompt_idx = prompt_position(bank, &entries[dup_pos].prompt_id);
        match lmm.complete(&request_for(prompt_idx, next_sample)) {
            Ok(text) if !text.trim().is_empty() => {
                let fresh_is_new = !entries
                    .iter()
                    .enumerate()
                    .any(|(j, e)| j != dup_pos && e.text.trim() == text.trim());
                if fresh_is_new {
                    entries[dup_pos].text = text;
                    entries[dup_pos].sample_index = next_sample;
                } // else: draw was another duplicate; budget still consumed
            }
            Ok(_) | Err(_) => {}
        }
        next_sample += 1;
    }

    let collected = entries.len();
    if collected == 0 {
        return Err(Error::Provider {
            provider: lmm.model_id().to_string(),
            message: format!("no descriptions could be generated for image {}", record.id),
        });
    }
    let unique = {
        let mut texts: Vec<&str> = entries.iter().map(|e| e.text.trim()).collect();
        texts.sort_unstable();
        texts.dedup();
        texts.len()
    };
    let report = DescriptionReport {
        requested: n,
        collected,
        unique,
        failed,
        low_diversity: (unique as f64) / (collected as f64) < LOW_DIVERSITY_THRESHOLD,
    };
    let set = DescriptionSet {
        image_id: record.id.clone(),
        entries,
        provider_id: lmm.model_id().to_string(),
    };
    Ok((set, report))
}

/// Index of the first entry whose trimmed text duplicates an earlier entry.
fn first_duplicate(entries: &[DescriptionEntry]) -> Option<usize> {
    for i in 1..entries.len() {
        if entries[..i].iter().any(|e| e.text.trim() == entries[i].text.trim()) {
            return Some(i);
        }
    }
    None
}

/// Position of a prompt id in the bank (0 if somehow absent).
fn prompt_position(bank: &PromptBank, prompt_id: &str) -> usize {
    bank.prompts.iter().position(|p| p.prompt_id == prompt_id).unwrap_or(0)
}
