//! The run ledger: one JSONL file per run directory recording, per round,
//! what happened to every manifest image, guarded by a config fingerprint
//! so two different configurations can never interleave in one directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{read_to_string, write_atomic};

/// What a round did with one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    /// A training row was appended for this image.
    Emitted,
    /// Candidates existed but none survived the label constraint.
    Discarded,
    /// Round 0 only: the provider never produced a label-bearing rewrite,
    /// so the deterministic local template answered (a row was appended).
    Fallback,
    /// Provider failures starved this image; no row this round.
    ProviderShortfall,
}

/// Per-status tallies for one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub emitted: usize,
    pub discarded: usize,
    pub fallback: usize,
    pub provider_shortfall: usize,
}

impl StatusCounts {
    fn add(&mut self, status: ImageStatus) {
        match status {
            ImageStatus::Emitted => self.emitted += 1,
            ImageStatus::Discarded => self.discarded += 1,
            ImageStatus::Fallback => self.fallback += 1,
            ImageStatus::ProviderShortfall => self.provider_shortfall += 1,
        }
    }
}

/// One round's ledger block: every manifest image exactly once, in manifest
/// order, plus the tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLedger {
    pub round: u32,
    pub images: Vec<(String, ImageStatus)>,
    pub counts: StatusCounts,
}

impl RoundLedger {
    pub fn new(round: u32, images: Vec<(String, ImageStatus)>) -> Self {
        let mut counts = StatusCounts::default();
        for (_, status) in &images {
            counts.add(*status);
        }
        RoundLedger { round, images, counts }
    }

    pub fn status_of(&self, image_id: &str) -> Option<ImageStatus> {
        self.images.iter().find(|(id, _)| id == image_id).map(|(_, s)| *s)
    }
}

/// One line of the serialized ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LedgerLine {
    Run { fingerprint: String, policy: String },
    Image { round: u32, image_id: String, status: ImageStatus },
    Round { round: u32, counts: StatusCounts },
}

/// The whole ledger for one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub fingerprint: String,
    pub policy: String,
    pub rounds: BTreeMap<u32, RoundLedger>,
}

impl Ledger {
    pub fn new(fingerprint: &str, policy: &str) -> Self {
        Ledger { fingerprint: fingerprint.into(), policy: policy.into(), rounds: BTreeMap::new() }
    }

    /// Load the ledger if one exists. A ledger written by a different
    /// configuration refuses to load: reusing a run directory with changed
    /// knobs would silently mix incompatible data.
    pub fn load_guarded(path: &Path, fingerprint: &str, policy: &str) -> Result<Ledger> {
        if !path.exists() {
            return Ok(Ledger::new(fingerprint, policy));
        }
        let text = read_to_string(path)?;
        let mut ledger: Option<Ledger> = None;
        let mut pending: BTreeMap<u32, Vec<(String, ImageStatus)>> = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LedgerLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            match parsed {
                LedgerLine::Run { fingerprint: fp, policy: pol } => {
                    if ledger.is_some() {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: idx + 1,
                            message: "duplicate run header".into(),
                        });
                    }
                    ledger = Some(Ledger::new(&fp, &pol));
                }
                LedgerLine::Image { round, image_id, status } => {
                    pending.entry(round).or_default().push((image_id, status));
                }
                LedgerLine::Round { round, counts } => {
                    let images = pending.remove(&round).unwrap_or_default();
                    let block = RoundLedger::new(round, images);
                    if block.counts != counts {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: idx + 1,
                            message: format!("round {round} counts do not match its entries"),
                        });
                    }
                    ledger
                        .as_mut()
                        .ok_or_else(|| Error::Parse {
                            path: path.to_path_buf(),
                            line: idx + 1,
                            message: "round block before run header".into(),
                        })?
                        .rounds
                        .insert(round, block);
                }
            }
        }
        let ledger = ledger.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "ledger has no run header".into(),
        })?;
        if ledger.fingerprint != fingerprint {
            return Err(Error::Config(format!(
                "run directory was created with a different configuration \
                 (ledger policy '{}'); use a fresh output_root or restore the \
                 original settings",
                ledger.policy
            )));
        }
        Ok(ledger)
    }

    /// Record a round, replacing it and everything after it: a rerun of
    /// round T supersedes any previously recorded later rounds, which are
    /// now stale.
    pub fn record_round(&mut self, block: RoundLedger) {
        let stale: Vec<u32> = self.rounds.range(block.round..).map(|(r, _)| *r).collect();
        for r in stale {
            self.rounds.remove(&r);
        }
        self.rounds.insert(block.round, block);
    }

    /// Require that every round in 0..round is already recorded.
    pub fn require_rounds_before(&self, round: u32) -> Result<()> {
        for r in 0..round {
            if !self.rounds.contains_key(&r) {
                return Err(Error::Config(format!(
                    "round {round} needs completed rounds 0..{round}, but round {r} \
                     has not run in this output_root"
                )));
            }
        }
        Ok(())
    }

    /// Serialize and atomically write the whole ledger.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut lines = Vec::new();
        let header = LedgerLine::Run {
            fingerprint: self.fingerprint.clone(),
            policy: self.policy.clone(),
        };
        lines.push(serde_json::to_string(&header).expect("ledger serializes"));
        for block in self.rounds.values() {
            for (image_id, status) in &block.images {
                let line = LedgerLine::Image {
                    round: block.round,
                    image_id: image_id.clone(),
                    status: *status,
                };
                lines.push(serde_json::to_string(&line).expect("ledger serializes"));
            }
            let line = LedgerLine::Round { round: block.round, counts: block.counts };
            lines.push(serde_json::to_string(&line).expect("ledger serializes"));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(round: u32, statuses: &[(&str, ImageStatus)]) -> RoundLedger {
        RoundLedger::new(
            round,
            statuses.iter().map(|(id, s)| (id.to_string(), *s)).collect(),
        )
    }

    #[test]
    fn round_trips_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let mut ledger = Ledger::new("fp-1", "paper_literal");
        ledger.record_round(block(
            0,
            &[
                ("a", ImageStatus::Emitted),
                ("b", ImageStatus::Fallback),
                ("c", ImageStatus::ProviderShortfall),
            ],
        ));
        ledger.record_round(block(1, &[("a", ImageStatus::Discarded)]));
        ledger.write(&path).unwrap();

        let loaded = Ledger::load_guarded(&path, "fp-1", "paper_literal").unwrap();
        assert_eq!(loaded, ledger);
        let r0 = &loaded.rounds[&0];
        assert_eq!(r0.counts.emitted, 1);
        assert_eq!(r0.counts.fallback, 1);
        assert_eq!(r0.counts.provider_shortfall, 1);
        assert_eq!(r0.status_of("b"), Some(ImageStatus::Fallback));
    }

    #[test]
    fn fingerprint_mismatch_refuses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        Ledger::new("fp-1", "paper_literal").write(&path).unwrap();
        let err = Ledger::load_guarded(&path, "fp-2", "label_first").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rerun_of_a_round_drops_later_rounds() {
        let mut ledger = Ledger::new("fp", "paper_literal");
        ledger.record_round(block(0, &[("a", ImageStatus::Emitted)]));
        ledger.record_round(block(1, &[("a", ImageStatus::Emitted)]));
        ledger.record_round(block(2, &[("a", ImageStatus::Discarded)]));
        ledger.record_round(block(1, &[("a", ImageStatus::Discarded)]));
        assert_eq!(ledger.rounds.len(), 2, "rounds 1+ rewritten, round 2 dropped");
        assert_eq!(ledger.rounds[&1].counts.discarded, 1);
        assert!(ledger.require_rounds_before(2).is_ok());
        assert!(ledger.require_rounds_before(3).is_err());
    }

    #[test]
    fn missing_file_starts_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let ledger =
            Ledger::load_guarded(&dir.path().join("none.jsonl"), "fp", "paper_literal").unwrap();
        assert!(ledger.rounds.is_empty());
    }
}
