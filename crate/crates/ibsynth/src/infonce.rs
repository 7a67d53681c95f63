//! Contrastive mutual-information scores for concepts and answers.
//!
//! Both scores share one shape: a sum over positive pairs of
//! `log( exp(a_i) / (exp(a_i) + sum_k exp(b_k)) )`, where `a_i` is a
//! temperature-scaled similarity for the i-th positive and `b_k` the scaled
//! similarities of a fixed negative set. Each term is at most 0, so the sum
//! is a lower bound that grows (toward 0) as positives dominate negatives.

use crate::embed::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};

/// How to treat an empty negative set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyNegatives {
    /// Refuse: a degenerate pool almost always signals a corpus problem
    /// (e.g. a single-image corpus); callers must opt in explicitly.
    Reject,
    /// Analytic convention: with no negatives every term is
    /// `log(exp(a)/exp(a)) = 0`, so the score is exactly 0.
    AnalyticZero,
}

/// Numerically stable sum of `a_i - logsumexp({a_i} ∪ negatives)` over all
/// positive logits. The per-term max subtraction keeps very small
/// temperatures (large logits) from overflowing `exp`.
pub(crate) fn log_ratio_sum(positive_logits: &[f64], negative_logits: &[f64]) -> f64 {
    let mut total = 0.0;
    for &a in positive_logits {
        let mut max = a;
        for &b in negative_logits {
            if b > max {
                max = b;
            }
        }
        let mut denom = (a - max).exp();
        for &b in negative_logits {
            denom += (b - max).exp();
        }
        total += a - (max + denom.ln());
    }
    total
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Validation(format!(
            "temperature must be a positive finite number, got {tau}"
        )));
    }
    Ok(())
}

/// Score one concept against an image's descriptions (positives) and a pool
/// of other images' descriptions (negatives):
///
/// ```text
/// s_j = Σ_i log( exp(sim(d_i, z_j)/τ) / (exp(sim(d_i, z_j)/τ) + Σ_k exp(sim(n_k, z_j)/τ)) )
/// ```
///
/// An empty negative pool is rejected unless the caller opts into the
/// analytic zero convention via `on_empty`.
pub fn infonce_concept_score(
    positives: &[EmbeddingVector],
    concept: &EmbeddingVector,
    negatives: &[EmbeddingVector],
    tau: f64,
    on_empty: EmptyNegatives,
) -> Result<f64> {
    check_tau(tau)?;
    if positives.is_empty() {
        return Err(Error::Validation("concept score needs at least one description".into()));
    }
    if negatives.is_empty() && on_empty == EmptyNegatives::Reject {
        return Err(Error::Validation(
            "empty negative pool; opt into the analytic-zero convention for degenerate corpora"
                .into(),
        ));
    }
    let pos: Vec<f64> = positives
        .iter()
        .map(|d| cosine_similarity(d, concept).map(|s| s / tau))
        .collect::<Result<_>>()?;
    let neg: Vec<f64> = negatives
        .iter()
        .map(|n| cosine_similarity(n, concept).map(|s| s / tau))
        .collect::<Result<_>>()?;
    let score = log_ratio_sum(&pos, &neg);
    if !score.is_finite() {
        return Err(Error::NonFinite("concept score".into()));
    }
    Ok(score)
}

/// Score a candidate answer against the selected concepts (positives) with
/// the rejected concepts as negatives:
///
/// ```text
/// s'_i = Σ_j log( exp(sim(y_i, z_j)/τ) / (exp(sim(y_i, z_j)/τ) + Σ_k exp(sim(y_i, z_k)/τ)) )
/// ```
///
/// where z_j ranges over the selected set and z_k over the rejected set.
/// An empty rejected set makes every term 0 by the analytic convention — it
/// is the expected state when selection kept every concept.
pub fn infonce_answer_score(
    answer: &EmbeddingVector,
    selected: &[EmbeddingVector],
    rejected: &[EmbeddingVector],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if selected.is_empty() {
        return Err(Error::Validation("answer score needs at least one selected concept".into()));
    }
    let pos: Vec<f64> = selected
        .iter()
        .map(|z| cosine_similarity(answer, z).map(|s| s / tau))
        .collect::<Result<_>>()?;
    let neg: Vec<f64> = rejected
        .iter()
        .map(|z| cosine_similarity(answer, z).map(|s| s / tau))
        .collect::<Result<_>>()?;
    let score = log_ratio_sum(&pos, &neg);
    if !score.is_finite() {
        return Err(Error::NonFinite("answer score".into()));
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::slice::from_ref;

    fn unit(model: &str, values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(model, values.to_vec()).unwrap()
    }

    /// sim(d, z) = 1 for the positive, 0 for the single negative, tau = 1:
    /// the score is 1 - ln(e + 1) = -0.313261687...
    #[test]
    fn hand_anchor_single_positive() {
        let z = unit("m", &[1.0, 0.0]);
        let d = unit("m", &[1.0, 0.0]);
        let n = unit("m", &[0.0, 1.0]);
        let s = infonce_concept_score(&[d], &z, &[n], 1.0, EmptyNegatives::Reject).unwrap();
        assert!((s - (-0.313262)).abs() < 1e-6, "got {s}");
    }

    /// Two identical positives double the single-positive score exactly.
    #[test]
    fn additivity_over_positives() {
        let z = unit("m", &[1.0, 0.0]);
        let d = unit("m", &[1.0, 0.0]);
        let n = unit("m", &[0.0, 1.0]);
        let one =
            infonce_concept_score(from_ref(&d), &z, from_ref(&n), 1.0, EmptyNegatives::Reject)
                .unwrap();
        let two =
            infonce_concept_score(&[d.clone(), d], &z, &[n], 1.0, EmptyNegatives::Reject).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn empty_negatives_policy() {
        let z = unit("m", &[1.0, 0.0]);
        let d = unit("m", &[0.6, 0.8]);
        assert!(infonce_concept_score(from_ref(&d), &z, &[], 0.07, EmptyNegatives::Reject).is_err());
        let s = infonce_concept_score(&[d], &z, &[], 0.07, EmptyNegatives::AnalyticZero).unwrap();
        assert_eq!(s, 0.0);
    }

    /// With every concept selected (no rejected set) the answer score is 0.
    #[test]
    fn answer_score_zero_when_nothing_rejected() {
        let y = unit("m", &[0.3, 0.7, 0.1]);
        let z1 = unit("m", &[1.0, 0.0, 0.0]);
        let z2 = unit("m", &[0.0, 1.0, 0.0]);
        let s = infonce_answer_score(&y, &[z1, z2], &[], 0.07).unwrap();
        assert_eq!(s, 0.0);
    }

    /// Two selected concepts at similarity 1, one rejected at similarity 0,
    /// tau = 1: each term is -0.313262, total -0.626524.
    #[test]
    fn answer_score_hand_anchor() {
        let y = unit("m", &[1.0, 0.0]);
        let sel = vec![unit("m", &[1.0, 0.0]), unit("m", &[1.0, 0.0])];
        let rej = vec![unit("m", &[0.0, 1.0])];
        let s = infonce_answer_score(&y, &sel, &rej, 1.0).unwrap();
        assert!((s - (-0.626524)).abs() < 1e-6, "got {s}");
    }

    /// Tiny temperatures must not overflow: logits of ±1/0.01 = ±100.
    #[test]
    fn stable_at_small_temperature() {
        let z = unit("m", &[1.0, 0.0]);
        let d = unit("m", &[1.0, 0.0]);
        let n = unit("m", &[-1.0, 0.0]);
        let s = infonce_concept_score(&[d], &z, &[n], 0.01, EmptyNegatives::Reject).unwrap();
        assert!(s.is_finite());
        // Positive logit 100, negative -100: the term is ~ -exp(-200) ≈ 0.
        assert!(s.abs() < 1e-12, "got {s}");
    }

    #[test]
    fn rejects_bad_temperature_and_empty_positives() {
        let z = unit("m", &[1.0, 0.0]);
        let n = unit("m", &[0.0, 1.0]);
        assert!(
            infonce_concept_score(from_ref(&z), &z, from_ref(&n), 0.0, EmptyNegatives::Reject)
                .is_err()
        );
        assert!(
            infonce_concept_score(from_ref(&z), &z, from_ref(&n), -1.0, EmptyNegatives::Reject)
                .is_err()
        );
        assert!(infonce_concept_score(&[], &z, from_ref(&n), 1.0, EmptyNegatives::Reject).is_err());
        assert!(infonce_answer_score(&z, &[], &[n], 1.0).is_err());
    }

    /// Raising one positive similarity can only raise the score.
    #[test]
    fn monotone_in_positive_similarity() {
        let neg = [0.2 / 0.5, -0.4 / 0.5];
        let base = log_ratio_sum(&[0.1 / 0.5, 0.3 / 0.5], &neg);
        let raised = log_ratio_sum(&[0.5 / 0.5, 0.3 / 0.5], &neg);
        assert!(raised > base);
    }
}
