//! Concept scoring and threshold selection.
//!
//! Every concept in a label's pool is scored against the image's
//! descriptions (positives) and a sampled pool of other images'
//! descriptions (negatives). Concepts scoring above mean + beta_hat * std
//! are kept; if none clear the bar, the top-ranked concept is kept as a
//! flagged fallback so downstream stages always have at least one concept.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ConceptSet;
use crate::embed::{embed_all, EmbeddingVector, TextEmbedder};
use crate::error::{Error, Result};
use crate::infonce::{infonce_concept_score, EmptyNegatives};
use crate::util::fnv1a64;

/// One concept with its contrastive score and 1-based rank
/// (1 = highest score; ties broken by original concept order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConcept {
    pub concept: String,
    pub score: f64,
    pub rank: usize,
}

/// Descriptions borrowed from other images, used as contrastive negatives.
#[derive(Debug, Clone)]
pub struct NegativePool {
    /// (source image id, embedded description text)
    pub entries: Vec<(String, EmbeddingVector)>,
    /// Seed that drew this pool, recorded for reproducibility.
    pub sampling_seed: u64,
}

impl NegativePool {
    /// Sample up to `k` descriptions uniformly without replacement from
    /// other images' descriptions. `candidates` must exclude the target
    /// image's own descriptions. The draw is a partial Fisher-Yates keyed by
    /// the run seed mixed with the target image id, so it is stable across
    /// machines and scheduling.
    pub fn sample(
        target_image_id: &str,
        candidates: &[(String, String)],
        k: usize,
        run_seed: u64,
        embedder: &dyn TextEmbedder,
    ) -> Result<NegativePool> {
        let sampling_seed = run_seed ^ fnv1a64(target_image_id.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(sampling_seed);
        let mut indices: Vec<usize> = (0..candidates.len()).collect();
        let take = k.min(candidates.len());
        for i in 0..take {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(take);

        let texts: Vec<String> = indices.iter().map(|&i| candidates[i].1.clone()).collect();
        let vectors = embed_all(embedder, &texts)?;
        let entries = indices
            .iter()
            .zip(vectors)
            .map(|(&i, v)| (candidates[i].0.clone(), v))
            .collect();
        Ok(NegativePool { entries, sampling_seed })
    }

    pub fn vectors(&self) -> Vec<EmbeddingVector> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Score every concept in the pool against the image's descriptions.
/// Returns concepts in their original pool order, each carrying its score
/// and rank. An empty description list is an error; an empty negative pool
/// falls back to the analytic zero convention (degenerate single-image
/// corpora) rather than failing the image.
pub fn score_all_concepts(
    description_texts: &[String],
    concept_set: &ConceptSet,
    pool: &NegativePool,
    tau: f64,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<ScoredConcept>> {
    if description_texts.is_empty() {
        return Err(Error::Validation(format!(
            "no descriptions to score for label '{}'",
            concept_set.label
        )));
    }
    let positives = embed_all(embedder, description_texts)?;
    let concept_vectors = embed_all(embedder, &concept_set.concepts)?;
    let negatives = pool.vectors();
    let mut scored: Vec<ScoredConcept> = concept_set
        .concepts
        .iter()
        .zip(&concept_vectors)
        .map(|(concept, vector)| {
            let score = infonce_concept_score(
                &positives,
                vector,
                &negatives,
                tau,
                EmptyNegatives::AnalyticZero,
            )?;
            Ok(ScoredConcept { concept: concept.clone(), score, rank: 0 })
        })
        .collect::<Result<_>>()?;
    assign_ranks(&mut scored);
    Ok(scored)
}

/// Fill in 1-based ranks: descending by score, ties by original order.
pub fn assign_ranks(scored: &mut [ScoredConcept]) {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .score
            .partial_cmp(&scored[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for (rank_minus_one, idx) in order.into_iter().enumerate() {
        scored[idx].rank = rank_minus_one + 1;
    }
}

/// Outcome of thresholding one image's concept scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSelection {
    /// Selected concepts, best rank first.
    pub selected: Vec<ScoredConcept>,
    pub mu: f64,
    pub sigma: f64,
    pub beta_hat: f64,
    /// Sum of selected concepts' scores — the retained portion of the
    /// mutual-information lower bound.
    pub approx_mi: f64,
    /// True when no score cleared the threshold and the top-ranked concept
    /// was kept instead.
    pub fallback_used: bool,
}

/// Keep concepts with `score > mu + beta_hat * sigma` (strict), where mu and
/// sigma are the population mean and standard deviation of all scores. An
/// empty selection falls back to the single top-ranked concept, flagged.
pub fn select_concepts(scored: &[ScoredConcept], beta_hat: f64) -> Result<ConceptSelection> {
    if scored.is_empty() {
        return Err(Error::Validation("cannot select from an empty score list".into()));
    }
    if !beta_hat.is_finite() {
        return Err(Error::Validation(format!("beta_hat must be finite, got {beta_hat}")));
    }
    if scored.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite("concept scores".into()));
    }
    let n = scored.len() as f64;
    let mu = scored.iter().map(|s| s.score).sum::<f64>() / n;
    let variance = scored.iter().map(|s| (s.score - mu).powi(2)).sum::<f64>() / n;
    let sigma = variance.sqrt();
    let threshold = mu + beta_hat * sigma;

    let mut selected: Vec<ScoredConcept> =
        scored.iter().filter(|s| s.score > threshold).cloned().collect();
    selected.sort_by_key(|s| s.rank);

    let fallback_used = selected.is_empty();
    if fallback_used {
        let top = scored
            .iter()
            .min_by_key(|s| s.rank)
            .expect("non-empty input")
            .clone();
        selected.push(top);
    }
    let approx_mi = selected.iter().map(|s| s.score).sum();
    Ok(ConceptSelection { selected, mu, sigma, beta_hat, approx_mi, fallback_used })
}

/// Everything persisted per image after selection: the thresholding outcome
/// plus the full score table and the knobs that produced it, so later rounds
/// can rebuild both the selected set and its complement without rescoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub image_id: String,
    pub selected: Vec<ScoredConcept>,
    pub mu: f64,
    pub sigma: f64,
    pub beta_hat: f64,
    pub approx_mi: f64,
    pub fallback_used: bool,
    /// Every concept of the label's pool, original order, with score + rank.
    pub scores: Vec<ScoredConcept>,
    pub tau: f64,
    pub negative_pool_seed: u64,
}

impl SelectionResult {
    pub fn new(
        image_id: &str,
        scores: Vec<ScoredConcept>,
        selection: ConceptSelection,
        tau: f64,
        negative_pool_seed: u64,
    ) -> Self {
        SelectionResult {
            image_id: image_id.to_string(),
            selected: selection.selected,
            mu: selection.mu,
            sigma: selection.sigma,
            beta_hat: selection.beta_hat,
            approx_mi: selection.approx_mi,
            fallback_used: selection.fallback_used,
            scores,
            tau,
            negative_pool_seed,
        }
    }

    /// Concept strings selected as the image's grounding set.
    pub fn selected_texts(&self) -> Vec<String> {
        self.selected.iter().map(|s| s.concept.clone()).collect()
    }

    /// Concept strings not selected (the contrastive complement).
    pub fn rejected_texts(&self) -> Vec<String> {
        let chosen: std::collections::HashSet<&str> =
            self.selected.iter().map(|s| s.concept.as_str()).collect();
        self.scores
            .iter()
            .filter(|s| !chosen.contains(s.concept.as_str()))
            .map(|s| s.concept.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::DeterministicEmbedder;

    fn scored(values: &[f64]) -> Vec<ScoredConcept> {
        let mut v: Vec<ScoredConcept> = values
            .iter()
            .enumerate()
            .map(|(i, &score)| ScoredConcept { concept: format!("c{i}"), score, rank: 0 })
            .collect();
        assign_ranks(&mut v);
        v
    }

    #[test]
    fn hand_selection_case() {
        // Scores {2, 0, 0, 0}, beta 1: mu = 0.5, sigma = sqrt(0.75) ≈ 0.866,
        // threshold ≈ 1.366 — only the first concept clears it.
        let s = scored(&[2.0, 0.0, 0.0, 0.0]);
        let sel = select_concepts(&s, 1.0).unwrap();
        assert_eq!(sel.selected.len(), 1);
        assert_eq!(sel.selected[0].concept, "c0");
        assert!(!sel.fallback_used);
        assert!((sel.mu - 0.5).abs() < 1e-12);
        assert!((sel.sigma - 0.75_f64.sqrt()).abs() < 1e-12);
        assert!((sel.approx_mi - 2.0).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_fall_back_to_top_rank() {
        let s = scored(&[1.0, 1.0, 1.0]);
        let sel = select_concepts(&s, 1.0).unwrap();
        assert!(sel.fallback_used);
        assert_eq!(sel.selected.len(), 1);
        assert_eq!(sel.selected[0].concept, "c0", "tie broken by original order");
        assert_eq!(sel.sigma, 0.0);
    }

    #[test]
    fn ranks_are_a_permutation_with_stable_ties() {
        let s = scored(&[0.3, 0.9, 0.3, -1.0]);
        let ranks: Vec<usize> = s.iter().map(|c| c.rank).collect();
        assert_eq!(ranks, vec![2, 1, 3, 4]);
    }

    #[test]
    fn affine_rescaling_preserves_the_selected_set() {
        let base = scored(&[0.12, -0.8, 2.4, 0.5, 0.49]);
        let sel_base = select_concepts(&base, 1.0).unwrap();
        let rescaled = scored(&[
            3.0 * 0.12 + 7.0,
            3.0 * -0.8 + 7.0,
            3.0 * 2.4 + 7.0,
            3.0 * 0.5 + 7.0,
            3.0 * 0.49 + 7.0,
        ]);
        let sel_rescaled = select_concepts(&rescaled, 1.0).unwrap();
        let names = |sel: &ConceptSelection| {
            sel.selected.iter().map(|s| s.concept.clone()).collect::<Vec<_>>()
        };
        assert_eq!(names(&sel_base), names(&sel_rescaled));
    }

    #[test]
    fn scoring_ranks_overlapping_concept_first() {
        let embedder = DeterministicEmbedder::new(64).unwrap();
        let descriptions: Vec<String> = vec![
            "a bird with bright red plumage and a black mask".into(),
            "bright red plumage covers the body".into(),
            "red plumage, black mask around the eyes".into(),
        ];
        let concepts = ConceptSet {
            label: "Northern Cardinal".into(),
            concepts: vec!["bright red plumage".into(), "webbed gray feet".into()],
        };
        let pool_texts = vec![
            ("other1".to_string(), "a gray seabird floating on water".to_string()),
            ("other2".to_string(), "webbed feet paddle below the surface".to_string()),
        ];
        let pool = NegativePool::sample("target", &pool_texts, 2, 42, &embedder).unwrap();
        let scored =
            score_all_concepts(&descriptions, &concepts, &pool, 0.07, &embedder).unwrap();
        assert_eq!(scored[0].rank, 1, "the concept mentioned in every description wins");
        assert!(scored[0].score > scored[1].score);
    }

    #[test]
    fn pool_sampling_is_deterministic_and_bounded() {
        let embedder = DeterministicEmbedder::new(32).unwrap();
        let candidates: Vec<(String, String)> = (0..10)
            .map(|i| (format!("img{i}"), format!("description number {i}")))
            .collect();
        let a = NegativePool::sample("target", &candidates, 4, 7, &embedder).unwrap();
        let b = NegativePool::sample("target", &candidates, 4, 7, &embedder).unwrap();
        assert_eq!(a.sampling_seed, b.sampling_seed);
        let ids = |p: &NegativePool| p.entries.iter().map(|(id, _)| id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert_eq!(a.len(), 4);

        // Requesting more than available takes everything, once each.
        let all = NegativePool::sample("target", &candidates, 99, 7, &embedder).unwrap();
        assert_eq!(all.len(), 10);
        let mut unique = ids(&all);
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 10, "sampling is without replacement");
    }

    #[test]
    fn empty_descriptions_error() {
        let embedder = DeterministicEmbedder::new(32).unwrap();
        let concepts = ConceptSet { label: "X".into(), concepts: vec!["a".into()] };
        let pool = NegativePool { entries: vec![], sampling_seed: 0 };
        assert!(score_all_concepts(&[], &concepts, &pool, 0.07, &embedder).is_err());
    }
}
