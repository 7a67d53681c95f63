//! Synthetic-world studies that validate the selection machinery without
//! any network: a seeded generative world for the precision-vs-n trend, and
//! an exact enumeration check that more descriptions close the information
//! gap between descriptions and concepts.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ConceptSet;
use crate::embed::DeterministicEmbedder;
use crate::error::{Error, Result};
use crate::metrics::selection_precision;
use crate::selection::{score_all_concepts, NegativePool};

// ---------------------------------------------------------------------------
// Generative world
// ---------------------------------------------------------------------------

/// A latent "image": the subset of the concept universe that is actually
/// present, plus the observation noise model for sampled descriptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentImage {
    /// Concepts truly present (subset of the universe).
    pub true_concepts: Vec<String>,
    /// Probability each true concept is mentioned by one description.
    pub coverage_prob: f64,
    /// Probability each absent concept is spuriously mentioned.
    pub noise_prob: f64,
    pub seed: u64,
}

/// Attempts per description before giving up on drawing a non-empty one.
const EMPTY_DESCRIPTION_BUDGET: usize = 16;

/// Sample `n` noisy textual descriptions of a latent image. Every
/// description independently mentions each true concept with
/// `coverage_prob` and each absent concept with `noise_prob`; mentioned
/// concepts are shuffled and joined. Fully seeded: a fixed latent yields an
/// identical corpus on every run, and the first few descriptions of a
/// larger n are a prefix of a smaller n's corpus.
pub fn sample_world_descriptions(
    latent: &LatentImage,
    universe: &[String],
    n: usize,
) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::Validation("description count must be at least 1".into()));
    }
    if latent.true_concepts.is_empty() {
        return Err(Error::Validation("latent image has no true concepts".into()));
    }
    for c in &latent.true_concepts {
        if !universe.contains(c) {
            return Err(Error::Validation(format!("true concept '{c}' is not in the universe")));
        }
    }
    for (name, p) in [("coverage_prob", latent.coverage_prob), ("noise_prob", latent.noise_prob)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation(format!("{name} must be in [0,1], got {p}")));
        }
    }

    let truth: std::collections::HashSet<&str> =
        latent.true_concepts.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(latent.seed);
    let mut descriptions = Vec::with_capacity(n);
    for _ in 0..n {
        let mut text = None;
        for _ in 0..EMPTY_DESCRIPTION_BUDGET {
            let mut mentioned: Vec<&str> = Vec::new();
            for concept in universe {
                let p = if truth.contains(concept.as_str()) {
                    latent.coverage_prob
                } else {
                    latent.noise_prob
                };
                if rng.gen_bool(p) {
                    mentioned.push(concept);
                }
            }
            if mentioned.is_empty() {
                continue;
            }
            mentioned.shuffle(&mut rng);
            text = Some(mentioned.join(", "));
            break;
        }
        match text {
            Some(t) => descriptions.push(t),
            None => {
                return Err(Error::Validation(
                    "could not draw a non-empty description within budget; \
                     coverage/noise probabilities are degenerate"
                        .into(),
                ))
            }
        }
    }
    Ok(descriptions)
}

// ---------------------------------------------------------------------------
// Precision-vs-n experiment
// ---------------------------------------------------------------------------

/// Mean top-k precision at one description count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPoint {
    pub n: usize,
    pub mean_precision: f64,
    pub trials: usize,
}

/// The precision curve over all requested description counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionCurve {
    pub points: Vec<PrecisionPoint>,
}

/// Embedding dimension for the study; large enough that distinct concept
/// tokens rarely collide.
const WORLD_EMBED_DIM: usize = 256;
/// Descriptions sampled from the background image as contrastive negatives.
const WORLD_NEGATIVES: usize = 8;

/// Monte-Carlo study: how does top-k concept selection precision improve
/// with the number of sampled descriptions?
///
/// Each trial draws a target image (k true concepts) and a disjoint
/// background image (k different concepts) from the universe, samples
/// descriptions of both, scores every universe concept with the target's
/// descriptions as positives and the background's as negatives, and
/// measures top-k precision against the target's truth. Per-trial seeds are derived as
/// `seed XOR trial_index`, so trials are order-independent and the whole
/// curve is reproducible.
#[allow(clippy::too_many_arguments)]
pub fn run_precision_experiment(
    universe: &[String],
    k: usize,
    coverage_prob: f64,
    noise_prob: f64,
    n_values: &[usize],
    trials: usize,
    tau: f64,
    seed: u64,
) -> Result<PrecisionCurve> {
    if universe.is_empty() {
        return Err(Error::Validation("universe must not be empty".into()));
    }
    if k == 0 || 2 * k > universe.len() {
        return Err(Error::Validation(format!(
            "k must be in 1..={} so a disjoint background image exists, got {k}",
            universe.len() / 2
        )));
    }
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation("n_values must be non-empty and strictly increasing".into()));
    }
    if trials == 0 {
        return Err(Error::Validation("trials must be at least 1".into()));
    }

    let embedder = DeterministicEmbedder::new(WORLD_EMBED_DIM)?;
    let concept_set = ConceptSet { label: "synthetic".into(), concepts: universe.to_vec() };
    let max_n = *n_values.last().expect("non-empty");

    let mut sums = vec![0.0f64; n_values.len()];
    for trial in 0..trials {
        let trial_seed = seed ^ (trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);

        // The background image is a disjoint distractor: its descriptions
        // serve as contrastive negatives, so sharing a true concept with the
        // target would suppress exactly what the trial tries to recover.
        let mut indices: Vec<usize> = (0..universe.len()).collect();
        indices.shuffle(&mut rng);
        let target_truth: Vec<String> =
            indices[..k].iter().map(|&i| universe[i].clone()).collect();
        let background_truth: Vec<String> =
            indices[k..2 * k].iter().map(|&i| universe[i].clone()).collect();

        let target = LatentImage {
            true_concepts: target_truth.clone(),
            coverage_prob,
            noise_prob,
            seed: rng.gen(),
        };
        let background = LatentImage {
            true_concepts: background_truth,
            coverage_prob,
            noise_prob,
            seed: rng.gen(),
        };

        // One corpus per trial: smaller n values reuse its prefix, pairing
        // the comparison across n and shrinking Monte-Carlo variance.
        let target_descriptions = sample_world_descriptions(&target, universe, max_n)?;
        let negative_texts: Vec<(String, String)> =
            sample_world_descriptions(&background, universe, WORLD_NEGATIVES)?
                .into_iter()
                .enumerate()
                .map(|(i, text)| (format!("background-{i}"), text))
                .collect();
        let pool =
            NegativePool::sample("target", &negative_texts, WORLD_NEGATIVES, trial_seed, &embedder)?;

        for (slot, &n) in n_values.iter().enumerate() {
            let scored = score_all_concepts(
                &target_descriptions[..n],
                &concept_set,
                &pool,
                tau,
                &embedder,
            )?;
            let mut top_k: Vec<&crate::selection::ScoredConcept> =
                scored.iter().filter(|s| s.rank <= k).collect();
            top_k.sort_by_key(|s| s.rank);
            let selected: Vec<String> = top_k.iter().map(|s| s.concept.clone()).collect();
            sums[slot] += selection_precision(&selected, &target_truth, k)?;
        }
    }

    let points = n_values
        .iter()
        .zip(sums)
        .map(|(&n, sum)| PrecisionPoint { n, mean_precision: sum / trials as f64, trials })
        .collect();
    Ok(PrecisionCurve { points })
}

/// The default 12-concept universe for the shipped study configuration.
pub fn default_universe() -> Vec<String> {
    [
        "crimson crest feathers",
        "azure wing bars",
        "speckled ivory breast",
        "curved ebony beak",
        "golden eye rings",
        "forked charcoal tail",
        "olive nape streaks",
        "scarlet throat patch",
        "banded chestnut flanks",
        "slate gray hood",
        "white rump crescent",
        "amber leg scales",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Calibrated defaults for the shipped study: chosen so a single noisy
/// description gives mediocre precision while 25 descriptions nearly
/// saturate it.
pub const DEFAULT_WORLD_K: usize = 4;
pub const DEFAULT_WORLD_COVERAGE: f64 = 0.60;
pub const DEFAULT_WORLD_NOISE: f64 = 0.25;
pub const DEFAULT_WORLD_TAU: f64 = 0.07;
pub const DEFAULT_WORLD_TRIALS: usize = 200;
pub const DEFAULT_WORLD_SEED: u64 = 17;
pub const DEFAULT_WORLD_N_VALUES: [usize; 4] = [1, 5, 10, 25];

// ---------------------------------------------------------------------------
// Exact mutual information and the convergence toy check
// ---------------------------------------------------------------------------

/// Exact mutual information (nats) of a finite joint distribution given as
/// a table `joint[a][b] = P(A=a, B=b)`, with 0·log 0 := 0.
pub fn brute_force_mi(joint: &[Vec<f64>]) -> Result<f64> {
    if joint.is_empty() || joint.iter().any(|row| row.is_empty()) {
        return Err(Error::Validation("joint table must be non-empty".into()));
    }
    let cols = joint[0].len();
    if joint.iter().any(|row| row.len() != cols) {
        return Err(Error::Validation("joint table rows have unequal lengths".into()));
    }
    let mut total = 0.0f64;
    for row in joint {
        for &p in row {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Validation(format!("invalid probability {p}")));
            }
            total += p;
        }
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("joint table sums to {total}, expected 1")));
    }

    let p_a: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    let mut p_b = vec![0.0f64; cols];
    for row in joint {
        for (j, &p) in row.iter().enumerate() {
            p_b[j] += p;
        }
    }
    let mut mi = 0.0f64;
    for (i, row) in joint.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (p_a[i] * p_b[j])).ln();
            }
        }
    }
    Ok(mi)
}

/// One point of the convergence check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub n: usize,
    /// I(D; Z) with D = n noisy observations, exact by enumeration.
    pub mi_dz: f64,
    /// I(X; Z) − I(D; Z); shrinks as observations accumulate.
    pub gap: f64,
}

/// Output of [`theorem1_convergence_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Flip probability of each observation channel X → d_i.
    pub epsilon: f64,
    /// Flip probability of the fixed X → Z channel.
    pub z_flip_prob: f64,
    /// I(X; Z), the ceiling the observations converge toward.
    pub i_xz: f64,
    pub points: Vec<ConvergencePoint>,
}

/// Fixed correlation between the latent content X and the concept variable
/// Z in the toy model.
const Z_FLIP_PROB: f64 = 0.2;

/// Exact toy validation that observations approximate the source: X is a
/// fair bit, Z is X through a fixed binary symmetric channel, and each
/// description d_i is X through an independent symmetric channel with flip
/// probability `epsilon`. Enumerating D = (d_1..d_n) exactly shows I(D;Z)
/// rising toward I(X;Z) as n grows — more sampled descriptions recover more
/// of what the concepts can know about the image.
pub fn theorem1_convergence_check(
    epsilon: f64,
    n_values: &[usize],
) -> Result<ConvergenceReport> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Validation(format!("epsilon must be in (0, 0.5), got {epsilon}")));
    }
    if n_values.is_empty() {
        return Err(Error::Validation("n_values must not be empty".into()));
    }
    for &n in n_values {
        if n == 0 || n > 16 {
            return Err(Error::Validation(format!("n must be in 1..=16, got {n}")));
        }
    }

    // I(X;Z) from the exact 2x2 joint.
    let joint_xz: Vec<Vec<f64>> = (0..2)
        .map(|x| {
            (0..2)
                .map(|z| 0.5 * flip_prob(x, z, Z_FLIP_PROB))
                .collect()
        })
        .collect();
    let i_xz = brute_force_mi(&joint_xz)?;

    let mut points = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let rows = 1usize << n;
        let mut joint = vec![vec![0.0f64; 2]; rows];
        for (d, row) in joint.iter_mut().enumerate() {
            for (z, cell) in row.iter_mut().enumerate() {
                let mut p = 0.0;
                for x in 0..2usize {
                    let mut term = 0.5 * flip_prob(x, z, Z_FLIP_PROB);
                    for bit in 0..n {
                        let d_i = (d >> bit) & 1;
                        term *= flip_prob(x, d_i, epsilon);
                    }
                    p += term;
                }
                *cell = p;
            }
        }
        let mi_dz = brute_force_mi(&joint)?;
        points.push(ConvergencePoint { n, mi_dz, gap: i_xz - mi_dz });
    }
    Ok(ConvergenceReport { epsilon, z_flip_prob: Z_FLIP_PROB, i_xz, points })
}

/// P(out | in) for a binary symmetric channel with the given flip prob.
fn flip_prob(input: usize, output: usize, flip: f64) -> f64 {
    if input == output {
        1.0 - flip
    } else {
        flip
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_universe() -> Vec<String> {
        ["red crest", "blue wings", "long beak", "white tail", "green back", "dark hood"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn noiseless_world_mentions_exactly_the_truth() {
        let universe = small_universe();
        let latent = LatentImage {
            true_concepts: vec![universe[1].clone(), universe[3].clone()],
            coverage_prob: 1.0,
            noise_prob: 0.0,
            seed: 5,
        };
        let descriptions = sample_world_descriptions(&latent, &universe, 10).unwrap();
        assert_eq!(descriptions.len(), 10);
        for d in &descriptions {
            let mut parts: Vec<&str> = d.split(", ").collect();
            parts.sort_unstable();
            assert_eq!(parts, vec!["blue wings", "white tail"]);
        }
    }

    #[test]
    fn world_is_seeded_and_prefix_stable() {
        let universe = small_universe();
        let latent = LatentImage {
            true_concepts: vec![universe[0].clone()],
            coverage_prob: 0.7,
            noise_prob: 0.2,
            seed: 99,
        };
        let a = sample_world_descriptions(&latent, &universe, 8).unwrap();
        let b = sample_world_descriptions(&latent, &universe, 8).unwrap();
        assert_eq!(a, b);
        let prefix = sample_world_descriptions(&latent, &universe, 3).unwrap();
        assert_eq!(&a[..3], &prefix[..]);
    }

    #[test]
    fn degenerate_probabilities_error() {
        let universe = small_universe();
        let latent = LatentImage {
            true_concepts: vec![universe[0].clone()],
            coverage_prob: 0.0,
            noise_prob: 0.0,
            seed: 1,
        };
        assert!(sample_world_descriptions(&latent, &universe, 2).is_err());
    }

    #[test]
    fn noiseless_precision_is_one_at_every_n_and_tau() {
        let universe = small_universe();
        for tau in [0.07, 1.0] {
            let curve =
                run_precision_experiment(&universe, 2, 1.0, 0.0, &[1, 3], 20, tau, 11).unwrap();
            for point in &curve.points {
                assert_eq!(point.mean_precision, 1.0, "n={} tau={tau}", point.n);
            }
        }
    }

    #[test]
    fn experiment_is_deterministic_and_validates_input() {
        let universe = small_universe();
        let a = run_precision_experiment(&universe, 2, 0.6, 0.2, &[1, 4], 10, 0.07, 3).unwrap();
        let b = run_precision_experiment(&universe, 2, 0.6, 0.2, &[1, 4], 10, 0.07, 3).unwrap();
        assert_eq!(a, b);
        for p in &a.points {
            assert!((0.0..=1.0).contains(&p.mean_precision));
        }

        assert!(run_precision_experiment(&universe, 0, 0.6, 0.2, &[1], 10, 0.07, 3).is_err());
        assert!(run_precision_experiment(&universe, 2, 0.6, 0.2, &[4, 1], 10, 0.07, 3).is_err());
        assert!(run_precision_experiment(&universe, 2, 0.6, 0.2, &[], 10, 0.07, 3).is_err());
    }

    #[test]
    fn mi_hand_values() {
        // Independent uniform bits: I = 0.
        let independent = vec![vec![0.25, 0.25], vec![0.25, 0.25]];
        assert!(brute_force_mi(&independent).unwrap().abs() < 1e-15);

        // Identity coupling: I = ln 2.
        let identity = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
        let mi = brute_force_mi(&identity).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-12, "got {mi}");

        // X fair bit, D one observation through a 0.1-flip channel:
        // I = ln2 - H(0.1) with H the binary entropy in nats.
        let eps: f64 = 0.1;
        let bsc = vec![vec![0.5 * (1.0 - eps), 0.5 * eps], vec![0.5 * eps, 0.5 * (1.0 - eps)]];
        let expected = std::f64::consts::LN_2 - (-(eps * eps.ln()) - (1.0 - eps) * (1.0 - eps).ln());
        let mi = brute_force_mi(&bsc).unwrap();
        assert!((mi - expected).abs() < 1e-12, "got {mi}, expected {expected}");
        assert!((mi - 0.368064).abs() < 1e-6, "closed form evaluates to ~0.368064");
    }

    #[test]
    fn mi_is_symmetric_and_rejects_bad_tables() {
        let joint = vec![vec![0.1, 0.3], vec![0.4, 0.2]];
        let transposed = vec![vec![0.1, 0.4], vec![0.3, 0.2]];
        let a = brute_force_mi(&joint).unwrap();
        let b = brute_force_mi(&transposed).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a >= -1e-12, "MI is non-negative");

        assert!(brute_force_mi(&[vec![0.5, 0.4]]).is_err(), "sums to 0.9");
        assert!(brute_force_mi(&[vec![1.5, -0.5]]).is_err(), "negative entry");
        assert!(brute_force_mi(&[]).is_err());
    }

    #[test]
    fn convergence_gap_shrinks_with_more_observations() {
        let report = theorem1_convergence_check(0.1, &[1, 2, 3, 4]).unwrap();
        for pair in report.points.windows(2) {
            assert!(
                pair[1].gap < pair[0].gap,
                "gap must strictly decrease: {} -> {}",
                pair[0].gap,
                pair[1].gap
            );
            assert!(pair[1].mi_dz >= pair[0].mi_dz, "I(D;Z) is monotone");
        }
        for point in &report.points {
            assert!(
                point.mi_dz <= report.i_xz + 1e-12,
                "observations can never exceed the source: {} vs {}",
                point.mi_dz,
                report.i_xz
            );
            assert!(point.gap >= -1e-12);
        }
    }

    #[test]
    fn near_noiseless_channel_closes_the_gap_at_n_1() {
        let report = theorem1_convergence_check(1e-6, &[1]).unwrap();
        assert!(report.points[0].gap.abs() < 1e-4, "gap = {}", report.points[0].gap);
    }

    #[test]
    fn convergence_check_validates_input() {
        assert!(theorem1_convergence_check(0.0, &[1]).is_err());
        assert!(theorem1_convergence_check(0.5, &[1]).is_err());
        assert!(theorem1_convergence_check(0.1, &[]).is_err());
        assert!(theorem1_convergence_check(0.1, &[0]).is_err());
    }
}
