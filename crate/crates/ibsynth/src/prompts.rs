//! Prompt banks, query templates, and rewrite templates.
//!
//! Banks ship as JSON data files compiled into the binary, one per dataset
//! family; callers can override them with their own files. Rewrite templates
//! are per-family format strings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{fnv1a64, read_to_string};

/// Dataset family: picks the description prompt bank and rewrite template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFamily {
    #[serde(rename = "cub-200")]
    Cub200,
    StanfordDogs,
    Fgvc,
    Pld,
    Ham10000,
    ChestXray,
    #[default]
    Generic,
}

impl DatasetFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cub-200" => Ok(DatasetFamily::Cub200),
            "stanford-dogs" | "stanford_dogs" => Ok(DatasetFamily::StanfordDogs),
            "fgvc" => Ok(DatasetFamily::Fgvc),
            "pld" => Ok(DatasetFamily::Pld),
            "ham10000" => Ok(DatasetFamily::Ham10000),
            "chest-xray" => Ok(DatasetFamily::ChestXray),
            "generic" => Ok(DatasetFamily::Generic),
            other => Err(Error::Config(format!("unknown dataset family '{other}'"))),
        }
    }
}

/// One description prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub template: String,
}

/// An ordered, non-empty set of description prompts for one dataset family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub domain: String,
    pub prompts: Vec<Prompt>,
}

impl PromptBank {
    fn validate(self) -> Result<Self> {
        if self.prompts.is_empty() {
            return Err(Error::Validation(format!(
                "prompt bank '{}' has no prompts",
                self.domain
            )));
        }
        for p in &self.prompts {
            if p.template.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "prompt '{}' in bank '{}' is empty",
                    p.prompt_id, self.domain
                )));
            }
        }
        Ok(self)
    }

    /// The compiled-in bank for a dataset family. Only bird imagery has a
    /// published multi-prompt bank; every other family uses the generic
    /// single-prompt bank until the caller supplies one.
    pub fn builtin(family: DatasetFamily) -> Result<PromptBank> {
        let json = match family {
            DatasetFamily::Cub200 => include_str!("../assets/prompts/cub-200.json"),
            _ => include_str!("../assets/prompts/generic.json"),
        };
        let bank: PromptBank = serde_json::from_str(json)
            .map_err(|e| Error::Validation(format!("builtin prompt bank: {e}")))?;
        bank.validate()
    }

    /// Load a user-supplied bank from a JSON file.
    pub fn load(path: &Path) -> Result<PromptBank> {
        let text = read_to_string(path)?;
        let bank: PromptBank = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
        bank.validate()
    }
}

/// One query template with an `{item}` slot for the coarse label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub query_id: String,
    pub template: String,
}

impl QueryTemplate {
    /// Render the query for one coarse label. Never empty: the template is
    /// validated non-empty at load time.
    pub fn render(&self, coarse_label: &str) -> String {
        self.template.replace("{item}", coarse_label)
    }
}

/// The non-empty set of query templates a run draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBank {
    pub queries: Vec<QueryTemplate>,
}

impl QueryBank {
    fn validate(self) -> Result<Self> {
        if self.queries.is_empty() {
            return Err(Error::Validation("query bank has no templates".into()));
        }
        for q in &self.queries {
            if q.template.trim().is_empty() {
                return Err(Error::Validation(format!("query '{}' is empty", q.query_id)));
            }
        }
        Ok(self)
    }

    pub fn builtin() -> Result<QueryBank> {
        let bank: QueryBank =
            serde_json::from_str(include_str!("../assets/queries/default.json"))
                .map_err(|e| Error::Validation(format!("builtin query bank: {e}")))?;
        bank.validate()
    }

    pub fn load(path: &Path) -> Result<QueryBank> {
        let text = read_to_string(path)?;
        let bank: QueryBank = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
        bank.validate()
    }

    /// Deterministically assign a template to an image: the image id hashes
    /// to an index, so assignment is stable across runs and machines.
    pub fn assign(&self, image_id: &str) -> &QueryTemplate {
        let idx = (fnv1a64(image_id.as_bytes()) % self.queries.len() as u64) as usize;
        &self.queries[idx]
    }
}

/// Per-family rewrite template. `{label}`, `{concepts_str}`, and `{query}`
/// are filled at call time; concepts are joined with "; ".
pub fn rewrite_template(family: DatasetFamily) -> &'static str {
    match family {
        DatasetFamily::Cub200 | DatasetFamily::StanfordDogs | DatasetFamily::Generic => {
            "This is a picture of a {label} with the following visual features: {concepts_str}. \
             Based on the information provided, please answer the following question. \
             Question: '{query}'"
        }
        DatasetFamily::Ham10000 => {
            "This is a dermatoscopic image of {label} disease with the following visual features: \
             {concepts_str}. Based on the information provided, please answer the following \
             question. Question: '{query}'"
        }
        DatasetFamily::Pld | DatasetFamily::Fgvc => {
            "This is a picture of {label} with the following visual features: {concepts_str}. \
             Based on the information provided, please answer the following question. \
             Question: '{query}'"
        }
        DatasetFamily::ChestXray => {
            "This is a chest-xray of {label} with the following visual features: {concepts_str}. \
             Based on the information provided, please answer the following question. \
             Question: '{query}'"
        }
    }
}

/// Render the rewrite prompt for one image.
pub fn render_rewrite_prompt(
    family: DatasetFamily,
    label: &str,
    concepts: &[String],
    query: &str,
) -> String {
    rewrite_template(family)
        .replace("{label}", label)
        .replace("{concepts_str}", &concepts.join("; "))
        .replace("{query}", query)
}

/// Deterministic local answer used when the rewrite provider fails or never
/// produces a label-bearing answer.
pub fn local_fallback_answer(label: &str, concepts: &[String]) -> String {
    format!(
        "This is a {label}. Key visual features: {}.",
        concepts.join("; ")
    )
}

/// Judge prompt asking whether an answer contains an explanation; the reply
/// must be exactly 'true' or 'false'.
pub fn explanation_existence_prompt(answer: &str) -> String {
    format!(
        "Determine whether the following answer contains a valid explanation supporting its \
         conclusion. Respond with only 'true' or 'false'.\n\nAnswer: {answer}\n\nContains an \
         explanation?"
    )
}

/// Judge prompt scoring how consistent an explanation is with a concept
/// list; the reply must be a single score in [0, 1].
pub fn consistency_score_prompt(concepts: &[String], explanation: &str) -> String {
    format!(
        "Evaluate the coherence and logical alignment of the following explanation with the \
         provided concepts. Please note: the explanation does not need to fully encompass all \
         concepts.\n\nAssign a consistency score between 0 and 1, where 1 indicates the \
         explanation contains no irrelevant information to the listed concepts, and 0 indicates \
         complete misalignment with entirely irrelevant information. Only give the score.\n\n\
         Concepts: {}\nExplanation: {explanation}\n\nConsistency Score:",
        concepts.join("; ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_banks_parse() {
        let bird = PromptBank::builtin(DatasetFamily::Cub200).unwrap();
        assert_eq!(bird.prompts.len(), 3);
        assert!(bird.prompts[0].template.starts_with("Focus solely on the bird"));

        let generic = PromptBank::builtin(DatasetFamily::Pld).unwrap();
        assert_eq!(generic.prompts.len(), 1);
        assert_eq!(generic.prompts[0].template, "Please describe the image.");

        let queries = QueryBank::builtin().unwrap();
        assert!(!queries.queries.is_empty());
    }

    #[test]
    fn query_renders_item_slot() {
        let q = QueryTemplate {
            query_id: "q".into(),
            template: "What is the {item} in this image? Please provide your reasoning.".into(),
        };
        assert_eq!(
            q.render("bird"),
            "What is the bird in this image? Please provide your reasoning."
        );
        assert!(!q.render("airplane").is_empty());
    }

    #[test]
    fn query_assignment_is_stable() {
        let bank = QueryBank::builtin().unwrap();
        let a = bank.assign("img-001").query_id.clone();
        let b = bank.assign("img-001").query_id.clone();
        assert_eq!(a, b);
    }

    #[test]
    fn rewrite_prompt_renders_exactly() {
        let prompt = render_rewrite_prompt(
            DatasetFamily::Cub200,
            "Pug",
            &["Deep-set, almond-shaped eyes".to_string()],
            "<q>",
        );
        assert_eq!(
            prompt,
            "This is a picture of a Pug with the following visual features: Deep-set, \
             almond-shaped eyes. Based on the information provided, please answer the following \
             question. Question: '<q>'"
        );
    }

    #[test]
    fn family_templates_differ_where_published() {
        let ham = render_rewrite_prompt(DatasetFamily::Ham10000, "melanoma", &["x".into()], "q");
        assert!(ham.starts_with("This is a dermatoscopic image of melanoma disease"));
        let pld = render_rewrite_prompt(DatasetFamily::Pld, "bacterial spot", &["x".into()], "q");
        assert!(pld.starts_with("This is a picture of bacterial spot with"));
        let xray = render_rewrite_prompt(DatasetFamily::ChestXray, "pneumonia", &["x".into()], "q");
        assert!(xray.starts_with("This is a chest-xray of pneumonia with"));
    }

    #[test]
    fn fallback_answer_contains_label_and_concepts() {
        let ans = local_fallback_answer("Pug", &["a".into(), "b".into()]);
        assert_eq!(ans, "This is a Pug. Key visual features: a; b.");
    }
}
