//! Run directory persistence: manifest, append-only event log, timing side
//! channel, and replay.
//!
//! Layout of a run directory:
//!
//! ```text
//! <run>/manifest.json   run manifest (pretty JSON)
//! <run>/events.log      one JSON event per line, seq contiguous from 0
//! <run>/timing.log      per-generation latency and wall-clock time (JSON lines)
//! <run>/reports/        CSV tables and summary.txt
//! ```
//!
//! `events.log` is deterministic for scripted backends. Everything
//! time-dependent goes to `manifest.json`'s `created_unix` field and to
//! `timing.log`.

mod log;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use log::{read_events, EventStore, FileLog, MemoryLog, TimingLog};

use crate::collab::{LoopConfig, RunOutcome, Termination};
use crate::consensus::RoundPartition;
use crate::gateway::{GenerationKey, ModelProfile};
use crate::sc::{CachedGeneration, GenerationCache, GenerationRecord, Prediction, SummarizeScope};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt event log at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("sequence gap: expected seq {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("duplicate event: seq {seq} is already in the log")]
    Duplicate { seq: u64 },
    #[error("replayed event {seq} differs from the logged one")]
    Diverged { seq: u64 },
    #[error("dataset digest mismatch: manifest has {expected}, file has {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Absolute path of the dataset file.
    pub dataset_path: PathBuf,
    /// SHA-256 of the dataset bytes.
    pub dataset_digest: String,
    pub participants: Vec<ModelProfile>,
    pub summarizer: ModelProfile,
    pub loop_config: LoopConfig,
    pub seed: u64,
    #[serde(default)]
    pub summarize_scope: SummarizeScope,
    /// Directory with template overrides, if any.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub dialects: Vec<crate::prompt::Dialect>,
    /// Creation time, seconds since the Unix epoch.
    pub created_unix: u64,
}

impl RunManifest {
    pub fn participant_ids(&self) -> Vec<String> {
        self.participants.iter().map(|p| p.model_id.clone()).collect()
    }

    pub fn verify_dataset(&self, bytes: &[u8]) -> Result<(), StoreError> {
        let actual = crate::dataset::digest(bytes);
        if actual != self.dataset_digest {
            return Err(StoreError::DigestMismatch {
                expected: self.dataset_digest.clone(),
                actual,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventRecord {
    Generation {
        key: GenerationKey,
        completion: String,
        attempt_count: u32,
        backend_meta: String,
    },
    Prediction {
        prediction: Prediction,
    },
    Partition {
        partition: RoundPartition,
    },
    Termination {
        termination: Termination,
        rounds: u32,
    },
}

impl EventRecord {
    pub fn from_generation(g: &GenerationRecord) -> Self {
        EventRecord::Generation {
            key: g.key.clone(),
            completion: g.completion.clone(),
            attempt_count: g.attempt_count,
            backend_meta: g.backend_meta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub record: EventRecord,
}

impl RunEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.log")
    }

    pub fn timing_path(&self) -> PathBuf {
        self.root.join("timing.log")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        std::fs::create_dir_all(&self.root).map_err(|e| StoreError::io(&self.root, e))?;
        let path = self.manifest_path();
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| StoreError::io(&path, e))
    }

    pub fn read_manifest(&self) -> Result<RunManifest, StoreError> {
        let path = self.manifest_path();
        let text = std::fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))
    }
}

/// Assigns sequence numbers and appends events. Events already present in the
/// log (a resumed run) are checked against the log instead of written again.
pub struct Recorder {
    store: Box<dyn EventStore>,
    existing: Vec<String>,
    next_seq: u64,
    timing: Option<TimingLog>,
}

impl Recorder {
    pub fn new(store: Box<dyn EventStore>, existing: &[RunEvent], timing: Option<TimingLog>) -> Self {
        Recorder {
            store,
            existing: existing.iter().map(RunEvent::to_line).collect(),
            next_seq: 0,
            timing,
        }
    }

    pub fn in_memory() -> Self {
        Recorder::new(Box::new(MemoryLog::default()), &[], None)
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Events written by this recorder's store (replayed + fresh).
    pub fn store(&self) -> &dyn EventStore {
        self.store.as_ref()
    }

    pub fn record(&mut self, records: Vec<EventRecord>, generations: &[GenerationRecord]) -> Result<(), StoreError> {
        let mut fresh = Vec::new();
        for record in records {
            let event = RunEvent {
                seq: self.next_seq,
                record,
            };
            match self.existing.get(self.next_seq as usize) {
                Some(line) if *line == event.to_line() => {}
                Some(_) => return Err(StoreError::Diverged { seq: self.next_seq }),
                None => fresh.push(event),
            }
            self.next_seq += 1;
        }
        if !fresh.is_empty() {
            self.store.append_batch(&fresh)?;
        }
        if let Some(timing) = &mut self.timing {
            for g in generations {
                if let Some(latency) = g.latency {
                    timing.record(&g.key, latency, g.attempt_count)?;
                }
            }
        }
        Ok(())
    }
}

/// Rebuilds outcome and generation cache from logged events.
pub fn replay(events: &[RunEvent], participants: Vec<String>) -> (RunOutcome, GenerationCache) {
    let mut outcome = RunOutcome::new(participants);
    let mut cache = GenerationCache::new();
    for event in events {
        match &event.record {
            EventRecord::Generation {
                key,
                completion,
                attempt_count,
                backend_meta,
            } => {
                cache.insert(
                    key.clone(),
                    CachedGeneration {
                        completion: completion.clone(),
                        attempt_count: *attempt_count,
                        backend_meta: backend_meta.clone(),
                    },
                );
            }
            EventRecord::Prediction { prediction } => outcome.insert(prediction.clone()),
            EventRecord::Partition { partition } => outcome.partitions.push(partition.clone()),
            EventRecord::Termination { termination, .. } => outcome.termination = Some(*termination),
        }
    }
    (outcome, cache)
}

/// Counts of logged events by kind, for status output.
pub fn event_counts(events: &[RunEvent]) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for e in events {
        let kind = match e.record {
            EventRecord::Generation { .. } => "generation",
            EventRecord::Prediction { .. } => "prediction",
            EventRecord::Partition { .. } => "partition",
            EventRecord::Termination { .. } => "termination",
        };
        *counts.entry(kind).or_default() += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Stage;

    fn gen_event(seq: u64, q: &str) -> RunEvent {
        RunEvent {
            seq,
            record: EventRecord::Generation {
                key: GenerationKey {
                    question_id: q.into(),
                    model_id: "m".into(),
                    round: 0,
                    sample_index: 0,
                    stage: Stage::Answer,
                },
                completion: "A.".into(),
                attempt_count: 1,
                backend_meta: "scripted".into(),
            },
        }
    }

    #[test]
    fn event_line_shape() {
        let line = gen_event(3, "q1").to_line();
        assert!(
            line.starts_with(r#"{"seq":3,"kind":"generation","key":{"question_id":"q1""#),
            "{line}"
        );
        let back: RunEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(back, gen_event(3, "q1"));

        let term = RunEvent {
            seq: 9,
            record: EventRecord::Termination {
                termination: Termination::ThresholdMet,
                rounds: 2,
            },
        };
        assert_eq!(
            term.to_line(),
            r#"{"seq":9,"kind":"termination","termination":"threshold_met","rounds":2}"#
        );
    }

    #[test]
    fn recorder_verifies_replayed_prefix() {
        let existing = vec![gen_event(0, "q1"), gen_event(1, "q2")];
        let mut log = MemoryLog::default();
        log.append_batch(&existing).unwrap();
        let mut rec = Recorder::new(Box::new(log), &existing, None);
        rec.record(vec![gen_event(0, "q1").record], &[]).unwrap();
        rec.record(vec![gen_event(0, "q2").record, gen_event(0, "q3").record], &[])
            .unwrap();
        assert_eq!(rec.store().len(), 3);
        assert_eq!(rec.next_seq(), 3);

        let mut log = MemoryLog::default();
        log.append_batch(&existing).unwrap();
        let mut rec = Recorder::new(Box::new(log), &existing, None);
        assert!(matches!(
            rec.record(vec![gen_event(0, "other").record], &[]),
            Err(StoreError::Diverged { seq: 0 })
        ));
    }

    #[test]
    fn replay_builds_cache_and_outcome() {
        let events = vec![
            gen_event(0, "q1"),
            RunEvent {
                seq: 1,
                record: EventRecord::Termination {
                    termination: Termination::RoundCapReached,
                    rounds: 3,
                },
            },
        ];
        let (outcome, cache) = replay(&events, vec!["m".into()]);
        assert_eq!(cache.len(), 1);
        assert_eq!(outcome.termination, Some(Termination::RoundCapReached));
        assert_eq!(event_counts(&events)["generation"], 1);
    }
}
