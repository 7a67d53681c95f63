//! Answer synthesis and rejection sampling: round-0 concept-grounded
//! rewrites, later-round candidate generation, contrastive answer scoring,
//! and best-answer selection under two discard policies.

use serde::{Deserialize, Serialize};

use crate::corpus::{ExampleSource, ImageRecord, TrainingExample};
use crate::embed::{embed_all, TextEmbedder};
use crate::error::{Error, Result};
use crate::infonce::infonce_answer_score;
use crate::prompts::{local_fallback_answer, render_rewrite_prompt, DatasetFamily};
use crate::providers::{LmmProvider, LmmRequest, RequestKind};
use crate::selection::SelectionResult;
use crate::util::normalize_for_match;

/// True when the normalized answer contains the normalized label as a
/// substring. Normalization lowercases, NFC-normalizes, maps hyphens and
/// underscores to spaces, and collapses whitespace, so "Yellow_breasted_Chat"
/// matches "a yellow breasted chat perched...".
pub fn label_contains(answer: &str, label: &str) -> bool {
    let answer_norm = normalize_for_match(answer);
    let label_norm = normalize_for_match(label);
    if label_norm.is_empty() {
        return false;
    }
    answer_norm.contains(&label_norm)
}

/// One generated candidate answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub sample_index: u32,
    pub text: String,
    /// Contrastive alignment with the image's selected concepts; NaN until
    /// scored, finite afterwards (never serialized unscored).
    pub score: f64,
    pub contains_label: bool,
}

/// Which candidates are eligible to win rejection sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardPolicy {
    /// Take the argmax over all candidates, then require the label: a
    /// winning answer without the label discards the whole image this round.
    PaperLiteral,
    /// Restrict to label-bearing candidates first, then take the argmax.
    LabelFirst,
}

impl DiscardPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(DiscardPolicy::PaperLiteral),
            "label_first" => Ok(DiscardPolicy::LabelFirst),
            other => Err(Error::Config(format!(
                "unknown policy '{other}' (expected paper_literal or label_first)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DiscardPolicy::PaperLiteral => "paper_literal",
            DiscardPolicy::LabelFirst => "label_first",
        }
    }
}

/// Outcome of rejection sampling for one image in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub image_id: String,
    /// The accepted answer, or None when the round discards this image.
    pub chosen: Option<CandidateAnswer>,
    /// Candidates not emitted this round (all of them when chosen is None).
    pub discarded_count: usize,
    pub policy: DiscardPolicy,
}

/// Result of a round-0 rewrite.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteOutput {
    pub example: TrainingExample,
    /// True when the local template answered because the provider never
    /// produced a label-bearing rewrite (or failed outright).
    pub used_fallback: bool,
}

/// Rewrite the selected concepts into a grounded answer for round 0.
///
/// The dataset family's rewrite template is filled with the label, the
/// "; "-joined selected concepts, and the query, and sent text-only to the
/// base model. An answer that does not contain the label is retried once
/// with a fresh sample index; failing that (or on provider failure), a
/// deterministic local template answers and the output is flagged.
pub fn rewrite_answer(
    record: &ImageRecord,
    selection: &SelectionResult,
    query: &str,
    family: DatasetFamily,
    temperature: f64,
    lmm: &dyn LmmProvider,
) -> Result<RewriteOutput> {
    let concepts = selection.selected_texts();
    if concepts.is_empty() {
        return Err(Error::Validation(format!(
            "image {} has no selected concepts to rewrite",
            record.id
        )));
    }
    let prompt = render_rewrite_prompt(family, &record.label, &concepts, query);
    let mut used_fallback = false;
    let mut answer = None;
    for sample_index in 0..2u32 {
        let request = LmmRequest {
            kind: RequestKind::Rewrite,
            image_id: record.id.clone(),
            image_ref: None, // text-only: the concepts stand in for the image
            prompt: prompt.clone(),
            temperature,
            sample_index,
            round: 0,
        };
        match lmm.complete(&request) {
            Ok(text) if label_contains(&text, &record.label) => {
                answer = Some(text);
                break;
            }
            Ok(text) => {
                log::warn!(
                    "rewrite for image {} (sample {sample_index}) missing label '{}': {:?}",
                    record.id,
                    record.label,
                    text.chars().take(80).collect::<String>()
                );
            }
            Err(e) => {
                log::warn!("rewrite for image {} (sample {sample_index}) failed: {e}", record.id);
            }
        }
    }
    let answer = answer.unwrap_or_else(|| {
        used_fallback = true;
        local_fallback_answer(&record.label, &concepts)
    });
    Ok(RewriteOutput {
        example: TrainingExample {
            image_id: record.id.clone(),
            image_ref: record.image_ref.clone(),
            query: query.to_string(),
            answer,
            round: 0,
            source: ExampleSource::Rewrite,
        },
        used_fallback,
    })
}

/// Sample `m` candidate answers from the round's fine-tuned model, image
/// attached. Individual failures shrink the set; an empty set is an error
/// for the caller to isolate. Candidates come back unscored (score = NaN).
pub fn generate_candidates(
    record: &ImageRecord,
    query: &str,
    m: usize,
    round: u32,
    temperature: f64,
    lmm: &dyn LmmProvider,
) -> Result<Vec<CandidateAnswer>> {
    if m == 0 {
        return Err(Error::Validation("candidate count must be at least 1".into()));
    }
    let mut candidates = Vec::with_capacity(m);
    for sample_index in 0..m as u32 {
        let request = LmmRequest {
            kind: RequestKind::Candidate,
            image_id: record.id.clone(),
            image_ref: Some(record.image_ref.clone()),
            prompt: query.to_string(),
            temperature,
            sample_index,
            round,
        };
        match lmm.complete(&request) {
            Ok(text) if !text.trim().is_empty() => candidates.push(CandidateAnswer {
                sample_index,
                contains_label: label_contains(&text, &record.label),
                text,
                score: f64::NAN,
            }),
            Ok(_) => log::warn!("empty candidate {sample_index} for image {}", record.id),
            Err(e) => {
                log::warn!("candidate {sample_index} for image {} failed: {e}", record.id)
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Provider {
            provider: lmm.model_id().to_string(),
            message: format!("no candidates could be generated for image {}", record.id),
        });
    }
    Ok(candidates)
}

/// Fill in every candidate's contrastive score: selected concepts are the
/// positives, the label's unselected concepts the negatives.
pub fn score_candidates(
    candidates: &mut [CandidateAnswer],
    selection: &SelectionResult,
    tau: f64,
    embedder: &dyn TextEmbedder,
) -> Result<()> {
    let selected_texts = selection.selected_texts();
    let rejected_texts = selection.rejected_texts();
    if selected_texts.is_empty() {
        return Err(Error::Validation(format!(
            "image {} has no selected concepts to score against",
            selection.image_id
        )));
    }
    let selected = embed_all(embedder, &selected_texts)?;
    let rejected = embed_all(embedder, &rejected_texts)?;
    let texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
    let answers = embed_all(embedder, &texts)?;
    for (candidate, vector) in candidates.iter_mut().zip(answers) {
        candidate.score = infonce_answer_score(&vector, &selected, &rejected, tau)?;
    }
    Ok(())
}

/// Pick the winning candidate (or none) under the given policy. Ties break
/// toward the lowest sample index, making selection deterministic.
pub fn select_best_answer(
    image_id: &str,
    candidates: &[CandidateAnswer],
    label: &str,
    policy: DiscardPolicy,
) -> Result<FilterDecision> {
    if candidates.is_empty() {
        return Err(Error::Validation(format!("no candidates to select for image {image_id}")));
    }
    if candidates.iter().any(|c| !c.score.is_finite()) {
        return Err(Error::NonFinite(format!("candidate scores for image {image_id}")));
    }

    let argmax = |pool: &[&CandidateAnswer]| -> Option<CandidateAnswer> {
        pool.iter()
            .max_by(|a, b| {
                a.score
                    .partial_cmp(&b.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    // On equal scores prefer the *lower* sample index.
                    .then(b.sample_index.cmp(&a.sample_index))
            })
            .map(|c| (*c).clone())
    };

    let chosen = match policy {
        DiscardPolicy::PaperLiteral => {
            let all: Vec<&CandidateAnswer> = candidates.iter().collect();
            let winner = argmax(&all).expect("non-empty candidates");
            // The label check happens *after* the argmax: a winner without
            // the label discards the image for this round.
            if label_contains(&winner.text, label) { Some(winner) } else { None }
        }
        DiscardPolicy::LabelFirst => {
            let eligible: Vec<&CandidateAnswer> =
                candidates.iter().filter(|c| label_contains(&c.text, label)).collect();
            argmax(&eligible)
        }
    };

    let discarded_count = match &chosen {
        Some(_) => candidates.len() - 1,
        None => candidates.len(),
    };
    Ok(FilterDecision {
        image_id: image_id.to_string(),
        chosen,
        discarded_count,
        policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{MockLmm, MockRule};
    use crate::selection::{ConceptSelection, ScoredConcept, SelectionResult};

    fn candidate(sample_index: u32, score: f64, text: &str) -> CandidateAnswer {
        CandidateAnswer {
            sample_index,
            text: text.into(),
            score,
            contains_label: false, // recomputed by callers that care
        }
    }

    #[test]
    fn label_contains_cases() {
        assert!(label_contains(
            "The bird is a male Northern Cardinal with bright red plumage.",
            "Northern Cardinal"
        ));
        assert!(label_contains(
            "a yellow breasted chat perched on a branch",
            "Yellow_breasted_Chat"
        ));
        assert!(label_contains(
            "BELL PEPPER LEAF WITH BACTERIAL SPOT DISEASE!",
            "Bell Pepper Leaf with Bacterial Spot Disease"
        ));
        assert!(!label_contains("some cardinal-like bird", "Northern Cardinal"));
        assert!(!label_contains("", "Pug"));
    }

    #[test]
    fn paper_literal_discards_when_argmax_lacks_label() {
        // Scores {-0.2 (has label), -0.1 (no label)}: the winner lacks the
        // label, so the image is discarded and both candidates count.
        let candidates = vec![
            candidate(0, -0.2, "This is a Pug with deep-set eyes."),
            candidate(1, -0.1, "A small wrinkly dog."),
        ];
        let decision =
            select_best_answer("img", &candidates, "Pug", DiscardPolicy::PaperLiteral).unwrap();
        assert!(decision.chosen.is_none());
        assert_eq!(decision.discarded_count, 2);
    }

    #[test]
    fn label_first_recovers_the_best_labeled_candidate() {
        let candidates = vec![
            candidate(0, -0.2, "This is a Pug with deep-set eyes."),
            candidate(1, -0.1, "A small wrinkly dog."),
        ];
        let decision =
            select_best_answer("img", &candidates, "Pug", DiscardPolicy::LabelFirst).unwrap();
        let chosen = decision.chosen.unwrap();
        assert_eq!(chosen.sample_index, 0);
        assert_eq!(decision.discarded_count, 1);
    }

    #[test]
    fn ties_break_toward_low_sample_index() {
        let candidates = vec![
            candidate(0, -0.5, "a Pug resting"),
            candidate(1, -0.5, "a Pug sitting"),
            candidate(2, -0.5, "a Pug standing"),
        ];
        let decision =
            select_best_answer("img", &candidates, "Pug", DiscardPolicy::PaperLiteral).unwrap();
        assert_eq!(decision.chosen.unwrap().sample_index, 0);
    }

    #[test]
    fn no_labeled_candidate_discards_under_both_policies() {
        let candidates =
            vec![candidate(0, -0.3, "a dog"), candidate(1, -0.9, "another dog")];
        for policy in [DiscardPolicy::PaperLiteral, DiscardPolicy::LabelFirst] {
            let decision = select_best_answer("img", &candidates, "Pug", policy).unwrap();
            assert!(decision.chosen.is_none());
            assert_eq!(decision.discarded_count, 2);
        }
    }

    #[test]
    fn unscored_candidates_are_rejected() {
        let candidates = vec![candidate(0, f64::NAN, "a Pug")];
        assert!(
            select_best_answer("img", &candidates, "Pug", DiscardPolicy::PaperLiteral).is_err()
        );
    }

    fn selection_with(selected: &[&str], all: &[&str]) -> SelectionResult {
        let mut scores: Vec<ScoredConcept> = all
            .iter()
            .enumerate()
            .map(|(i, c)| ScoredConcept { concept: c.to_string(), score: -(i as f64), rank: i + 1 })
            .collect();
        crate::selection::assign_ranks(&mut scores);
        let selected: Vec<ScoredConcept> =
            scores.iter().filter(|s| selected.contains(&s.concept.as_str())).cloned().collect();
        let approx_mi = selected.iter().map(|s| s.score).sum();
        SelectionResult::new(
            "img",
            scores.clone(),
            ConceptSelection {
                selected,
                mu: 0.0,
                sigma: 1.0,
                beta_hat: 1.0,
                approx_mi,
                fallback_used: false,
            },
            0.07,
            42,
        )
    }

    fn pug_record() -> ImageRecord {
        ImageRecord {
            id: "img".into(),
            image_ref: "img.jpg".into(),
            label: "Pug".into(),
            coarse_label: "dog".into(),
            raw_label: None,
        }
    }

    #[test]
    fn rewrite_prompt_is_exact_and_echo_answer_accepted() {
        let selection = selection_with(
            &["Deep-set, almond-shaped eyes"],
            &["Deep-set, almond-shaped eyes", "Erect, triangular ears"],
        );
        // The mock echoes the prompt, which contains "Pug", so the first
        // attempt is accepted and we can inspect the exact prompt sent.
        let mock = MockLmm::new("mock", vec![]).with_fallback_template("{prompt}");
        let out = rewrite_answer(&pug_record(), &selection, "<q>", DatasetFamily::Cub200, 0.7, &mock)
            .unwrap();
        assert!(!out.used_fallback);
        assert_eq!(
            out.example.answer,
            "This is a picture of a Pug with the following visual features: Deep-set, \
             almond-shaped eyes. Based on the information provided, please answer the following \
             question. Question: '<q>'"
        );
        assert_eq!(out.example.round, 0);
        assert_eq!(out.example.source, ExampleSource::Rewrite);
    }

    #[test]
    fn rewrite_falls_back_after_two_label_free_attempts() {
        let selection = selection_with(&["wrinkled brow"], &["wrinkled brow", "curled tail"]);
        let mock = MockLmm::new("mock", vec![]).with_fallback_template("I cannot help with that.");
        let out = rewrite_answer(&pug_record(), &selection, "q?", DatasetFamily::Cub200, 0.7, &mock)
            .unwrap();
        assert!(out.used_fallback);
        assert_eq!(out.example.answer, "This is a Pug. Key visual features: wrinkled brow.");
        assert_eq!(mock.calls(), 2, "one retry before falling back");
    }

    #[test]
    fn rewrite_falls_back_on_provider_failure() {
        let selection = selection_with(&["wrinkled brow"], &["wrinkled brow"]);
        let mock = MockLmm::new("mock", vec![MockRule { fail: true, ..Default::default() }]);
        let out = rewrite_answer(&pug_record(), &selection, "q?", DatasetFamily::Cub200, 0.7, &mock)
            .unwrap();
        assert!(out.used_fallback);
        assert!(out.example.answer.contains("Pug"));
    }

    #[test]
    fn candidates_carry_sample_indices_and_label_flags() {
        let mock = MockLmm::new(
            "mock",
            vec![MockRule {
                sample_index: Some(3),
                response: Some("this is a Pug".into()),
                ..Default::default()
            }],
        )
        .with_fallback_template("a dog {sample_index}");
        let candidates =
            generate_candidates(&pug_record(), "What dog?", 8, 1, 0.9, &mock).unwrap();
        assert_eq!(candidates.len(), 8);
        let indices: Vec<u32> = candidates.iter().map(|c| c.sample_index).collect();
        assert_eq!(indices, (0..8).collect::<Vec<u32>>());
        assert!(candidates[3].contains_label);
        assert!(!candidates[0].contains_label);
    }

    #[test]
    fn scoring_fills_finite_scores_favoring_concept_overlap() {
        use crate::embed::DeterministicEmbedder;
        let selection = selection_with(
            &["bright red plumage", "black face mask"],
            &["bright red plumage", "black face mask", "webbed gray feet"],
        );
        let mut candidates = vec![
            candidate(0, f64::NAN, "a bird with bright red plumage and a black face mask"),
            candidate(1, f64::NAN, "a bird with webbed gray feet paddling"),
        ];
        let embedder = DeterministicEmbedder::new(64).unwrap();
        score_candidates(&mut candidates, &selection, 0.07, &embedder).unwrap();
        assert!(candidates.iter().all(|c| c.score.is_finite()));
        assert!(
            candidates[0].score > candidates[1].score,
            "concept-aligned answer should outscore the misaligned one: {} vs {}",
            candidates[0].score,
            candidates[1].score
        );
    }
}
