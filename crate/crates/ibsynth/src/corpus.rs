//! Corpus data model: image manifests, label-level concept sets, and the
//! training examples the pipeline accumulates.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{collapse_whitespace, read_to_string};

/// One image in the corpus manifest.
///
/// Labels arriving with underscores (e.g. `Yellow_breasted_Chat`) are
/// normalized to spaces at ingestion; the original spelling is kept in
/// `raw_label` so nothing is lost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Unique, non-empty id.
    pub id: String,
    /// Opaque image reference (path or URI); never decoded by this crate.
    pub image_ref: String,
    /// Fine-grained class label, underscore-free after ingestion.
    pub label: String,
    /// Coarse category used to render query templates (e.g. "bird").
    pub coarse_label: String,
    /// Original label spelling when ingestion rewrote it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_label: Option<String>,
}

/// The label-level concept pool Z for one label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub label: String,
    /// Ordered, deduplicated, non-empty concept strings.
    pub concepts: Vec<String>,
}

/// All concept sets of a run, keyed by label.
#[derive(Debug, Clone, Default)]
pub struct ConceptSets {
    by_label: BTreeMap<String, ConceptSet>,
}

impl ConceptSets {
    /// Look up the concept set for a label, failing fast with the offending
    /// label so a typo in concepts.json surfaces immediately.
    pub fn get(&self, label: &str) -> Result<&ConceptSet> {
        self.by_label
            .get(label)
            .ok_or_else(|| Error::UnknownLabel { label: label.to_string() })
    }

    pub fn contains(&self, label: &str) -> bool {
        self.by_label.contains_key(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &String> {
        self.by_label.keys()
    }

    pub fn len(&self) -> usize {
        self.by_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_label.is_empty()
    }

    pub fn insert(&mut self, set: ConceptSet) {
        self.by_label.insert(set.label.clone(), set);
    }
}

/// Where a training pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleSource {
    /// Round-0 concept-grounded rewrite.
    Rewrite,
    /// Best-of-m filtering of model candidates in later rounds.
    RejectionSampling,
}

/// One (image, query, answer) training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub image_id: String,
    pub image_ref: String,
    pub query: String,
    pub answer: String,
    pub round: u32,
    pub source: ExampleSource,
}

/// Normalize a label at ingestion: underscores to spaces, whitespace runs
/// collapsed. Returns the normalized label and the original if it changed.
fn ingest_label(label: &str) -> (String, Option<String>) {
    let replaced: String = label.chars().map(|c| if c == '_' { ' ' } else { c }).collect();
    let normalized = collapse_whitespace(&replaced);
    if normalized == label {
        (normalized, None)
    } else {
        (normalized, Some(label.to_string()))
    }
}

#[derive(Deserialize)]
struct RawManifestLine {
    id: String,
    image_ref: String,
    label: String,
    coarse_label: String,
    #[serde(default)]
    raw_label: Option<String>,
}

/// Load a JSONL manifest. Errors carry 1-based line numbers; duplicate ids
/// report both offending lines.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = read_to_string(path)?;
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawManifestLine =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        for (field, value) in [
            ("id", &raw.id),
            ("image_ref", &raw.image_ref),
            ("label", &raw.label),
            ("coarse_label", &raw.coarse_label),
        ] {
            if value.trim().is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("field '{field}' is empty"),
                });
            }
        }
        if let Some(first_line) = seen.insert(raw.id.clone(), line_no) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id: raw.id,
                first_line,
                second_line: line_no,
            });
        }
        let (label, rewritten) = ingest_label(&raw.label);
        records.push(ImageRecord {
            id: raw.id,
            image_ref: raw.image_ref,
            label,
            coarse_label: raw.coarse_label,
            raw_label: raw.raw_label.or(rewritten),
        });
    }
    Ok(records)
}

/// Serialize records back to JSONL (one record per line, trailing newline).
pub fn manifest_to_jsonl(records: &[ImageRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Load concepts.json: a JSON object mapping label to a list of concept
/// strings. Duplicates (after whitespace collapsing) are dropped with order
/// preserved; an empty list for a label is an error.
pub fn load_concept_sets(path: &Path) -> Result<ConceptSets> {
    let text = read_to_string(path)?;
    let raw: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
    let mut sets = ConceptSets::default();
    for (label, concepts) in raw {
        let mut seen = std::collections::HashSet::new();
        let mut kept = Vec::new();
        for concept in concepts {
            let trimmed = concept.trim().to_string();
            if trimmed.is_empty() {
                return Err(Error::Validation(format!(
                    "label '{label}' has an empty concept string"
                )));
            }
            if seen.insert(collapse_whitespace(&trimmed)) {
                kept.push(trimmed);
            }
        }
        if kept.is_empty() {
            return Err(Error::Validation(format!(
                "label '{label}' has an empty concept list"
            )));
        }
        sets.insert(ConceptSet { label, concepts: kept });
    }
    Ok(sets)
}

/// Parse a train.jsonl produced by the pipeline.
pub fn load_training_examples(path: &Path) -> Result<Vec<TrainingExample>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}
