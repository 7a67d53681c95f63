//! Evaluation metrics: label accuracy, selection precision, and the two
//! judge-based explanation metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answers::label_contains;
use crate::corpus::ConceptSets;
use crate::error::{Error, Result};
use crate::prompts::{consistency_score_prompt, explanation_existence_prompt};
use crate::providers::{LmmProvider, LmmRequest, RequestKind};
use crate::util::read_to_string;

/// One model response under evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub image_id: String,
    pub answer: String,
    pub label: String,
}

/// Load a responses JSONL file ({image_id, answer, label} per line).
pub fn load_responses(path: &Path) -> Result<Vec<EvalResponse>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalResponse = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Fraction of answers containing their label (normalized containment).
/// An empty input is an error, not a silent 0 or 1.
pub fn accuracy(responses: &[EvalResponse]) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::Validation("cannot compute accuracy over zero responses".into()));
    }
    let hits = responses.iter().filter(|r| label_contains(&r.answer, &r.label)).count();
    Ok(hits as f64 / responses.len() as f64)
}

/// Top-k selection precision: |selected ∩ truth| / k. The selected list must
/// have exactly k entries.
pub fn selection_precision(selected: &[String], ground_truth: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    if selected.len() != k {
        return Err(Error::Validation(format!(
            "selected list has {} entries but k = {k}",
            selected.len()
        )));
    }
    let truth: std::collections::HashSet<&str> =
        ground_truth.iter().map(String::as_str).collect();
    let hits = selected.iter().filter(|s| truth.contains(s.as_str())).count();
    Ok(hits as f64 / k as f64)
}

/// Which judge-scored metric to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMetric {
    /// Fraction of answers the judge says contain an explanation.
    ExplanationExistence,
    /// Mean judged consistency (in [0,1]) of explanations with the label's
    /// concepts, over correct answers only.
    CognitionScore,
}

/// A judge-metric result. `value` is None when the metric could not be
/// computed at all (unreachable judge, nothing parseable) — it is reported
/// as unavailable, never fabricated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricOutcome {
    pub metric: JudgeMetric,
    pub value: Option<f64>,
    /// Responses whose judge replies parsed and entered the mean.
    pub judged: usize,
    /// Responses dropped after an unparseable or failed judge reply.
    pub missing: usize,
    /// Responses outside the metric's scope (e.g. incorrect answers for the
    /// cognition score).
    pub skipped: usize,
}

fn parse_bool_reply(reply: &str) -> Option<bool> {
    match reply.trim().trim_end_matches('.').to_lowercase().as_str() {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn parse_score_reply(reply: &str) -> Option<f64> {
    let value: f64 = reply.trim().parse().ok()?;
    (0.0..=1.0).contains(&value).then_some(value)
}

/// Ask the judge about every in-scope response and average the parsed
/// replies. Unparseable replies are retried once, then counted as missing
/// with a warning. Judge failures also count as missing, so an unreachable
/// endpoint yields `value: None` rather than an invented number.
pub fn judge_metric(
    responses: &[EvalResponse],
    concepts: &ConceptSets,
    judge: &dyn LmmProvider,
    metric: JudgeMetric,
) -> Result<MetricOutcome> {
    let mut judged = 0usize;
    let mut missing = 0usize;
    let mut skipped = 0usize;
    let mut total = 0.0f64;

    for response in responses {
        let prompt = match metric {
            JudgeMetric::ExplanationExistence => explanation_existence_prompt(&response.answer),
            JudgeMetric::CognitionScore => {
                // Only correct answers are scored for cognition.
                if !label_contains(&response.answer, &response.label) {
                    skipped += 1;
                    continue;
                }
                let set = concepts.get(&response.label)?;
                consistency_score_prompt(&set.concepts, &response.answer)
            }
        };
        let mut parsed: Option<f64> = None;
        for attempt in 0..2u32 {
            let request = LmmRequest {
                kind: RequestKind::Judge,
                image_id: response.image_id.clone(),
                image_ref: None,
                prompt: prompt.clone(),
                temperature: 0.0,
                sample_index: attempt,
                round: 0,
            };
            match judge.complete(&request) {
                Ok(reply) => {
                    parsed = match metric {
                        JudgeMetric::ExplanationExistence => {
                            parse_bool_reply(&reply).map(|b| if b { 1.0 } else { 0.0 })
                        }
                        JudgeMetric::CognitionScore => parse_score_reply(&reply),
                    };
                    if parsed.is_some() {
                        break;
                    }
                    log::warn!(
                        "unparseable judge reply for image {} (attempt {attempt}): {reply:?}",
                        response.image_id
                    );
                }
                Err(e) => {
                    log::warn!("judge call failed for image {}: {e}", response.image_id);
                }
            }
        }
        match parsed {
            Some(v) => {
                judged += 1;
                total += v;
            }
            None => missing += 1,
        }
    }

    let value = (judged > 0).then(|| total / judged as f64);
    Ok(MetricOutcome { metric, value, judged, missing, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ConceptSet;
    use crate::providers::mock::{MockLmm, MockRule};

    fn response(answer: &str, label: &str) -> EvalResponse {
        EvalResponse { image_id: format!("i{}", answer.len()), answer: answer.into(), label: label.into() }
    }

    #[test]
    fn accuracy_hand_counts() {
        let responses = vec![
            response("a Pug sleeping", "Pug"),
            response("a Beagle running", "Pug"),
            response("my favorite pug!", "Pug"),
            response("a cat", "Pug"),
        ];
        assert_eq!(accuracy(&responses).unwrap(), 0.5);

        let none = vec![response("a cat", "Pug"), response("a dog", "Pug")];
        assert_eq!(accuracy(&none).unwrap(), 0.0);

        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn precision_hand_values_and_size_check() {
        let truth: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let selected: Vec<String> = ["a", "b", "c", "x"].iter().map(|s| s.to_string()).collect();
        assert_eq!(selection_precision(&selected, &truth, 4).unwrap(), 0.75);
        assert_eq!(selection_precision(&truth, &truth, 4).unwrap(), 1.0);
        assert!(selection_precision(&selected[..2], &truth, 4).is_err());
    }

    fn concepts() -> ConceptSets {
        let mut sets = ConceptSets::default();
        sets.insert(ConceptSet {
            label: "Pug".into(),
            concepts: vec!["wrinkled brow".into(), "curled tail".into()],
        });
        sets
    }

    #[test]
    fn constant_judges_return_constants_exactly() {
        // Four correct answers: a power-of-two count, so the mean of a
        // repeated constant is exact in floating point.
        let responses: Vec<EvalResponse> =
            (0..4).map(|i| response(&format!("a Pug number {i}"), "Pug")).collect();

        let judge_true = MockLmm::new("judge", vec![]).with_fallback_template("true");
        let ee = judge_metric(&responses, &concepts(), &judge_true, JudgeMetric::ExplanationExistence)
            .unwrap();
        assert_eq!(ee.value, Some(1.0));
        assert_eq!(ee.judged, 4);

        let judge_score = MockLmm::new("judge", vec![]).with_fallback_template("0.8");
        let cs =
            judge_metric(&responses, &concepts(), &judge_score, JudgeMetric::CognitionScore).unwrap();
        assert_eq!(cs.value, Some(0.8));
    }

    #[test]
    fn cognition_score_skips_incorrect_answers() {
        let responses = vec![response("a Pug", "Pug"), response("a Beagle", "Pug")];
        let judge = MockLmm::new("judge", vec![]).with_fallback_template("0.5");
        let cs = judge_metric(&responses, &concepts(), &judge, JudgeMetric::CognitionScore).unwrap();
        assert_eq!(cs.judged, 1);
        assert_eq!(cs.skipped, 1);
    }

    #[test]
    fn unparseable_replies_retry_once_then_go_missing() {
        let responses = vec![response("a Pug", "Pug")];
        let judge = MockLmm::new("judge", vec![]).with_fallback_template("hmm, maybe?");
        let ee = judge_metric(&responses, &concepts(), &judge, JudgeMetric::ExplanationExistence)
            .unwrap();
        assert_eq!(ee.value, None);
        assert_eq!(ee.missing, 1);
        assert_eq!(judge.calls(), 2, "one retry per unparseable reply");
    }

    #[test]
    fn unreachable_judge_reports_unavailable() {
        let responses = vec![response("a Pug", "Pug")];
        let judge = MockLmm::new("judge", vec![MockRule { fail: true, ..Default::default() }]);
        let ee = judge_metric(&responses, &concepts(), &judge, JudgeMetric::ExplanationExistence)
            .unwrap();
        assert_eq!(ee.value, None, "never fabricate a metric");
        assert_eq!(ee.missing, 1);
    }

    #[test]
    fn reply_parsers() {
        assert_eq!(parse_bool_reply(" True. "), Some(true));
        assert_eq!(parse_bool_reply("false"), Some(false));
        assert_eq!(parse_bool_reply("yes"), None);
        assert_eq!(parse_score_reply("0.8"), Some(0.8));
        assert_eq!(parse_score_reply(" 1 "), Some(1.0));
        assert_eq!(parse_score_reply("1.5"), None);
        assert_eq!(parse_score_reply("high"), None);
    }
}
