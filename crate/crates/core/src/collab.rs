//! The collaboration loop: after the initial self-consistency round, every
//! participant re-reviews each disagreed question against a transcript of all
//! participants' answers and summaries, until the consensus rate reaches the
//! threshold or the round cap is hit.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::consensus::{self, ConsensusError, PredictionTable, RoundPartition};
use crate::dataset::{Letter, Question, QuestionSet};
use crate::gateway::{Gateway, ModelProfile, Role};
use crate::prompt::PromptForge;
use crate::sc::{GenerationCache, Mode, Prediction, ScContext, ScError, ScOutput, SummarizeScope};
use crate::store::{EventRecord, Recorder, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub label: String,
    pub answer: Letter,
    pub summary: String,
}

/// Anonymized answers and summaries of all participants for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub question_id: String,
    pub source_round: u32,
    pub entries: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Consensus-rate percentage at which the loop stops.
    pub threshold: f64,
    pub max_rounds: u32,
    pub n: u32,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            threshold: 80.0,
            max_rounds: 10,
            n: 10,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.threshold > 0.0 && self.threshold <= 100.0) {
            return Err(format!("threshold must be in (0, 100], got {}", self.threshold));
        }
        if self.max_rounds == 0 {
            return Err("max_rounds must be positive".into());
        }
        if self.n == 0 {
            return Err("n must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ThresholdMet,
    RoundCapReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub participants: Vec<String>,
    /// Round 0 first.
    pub partitions: Vec<RoundPartition>,
    /// Every prediction by (round, question id, model id).
    pub predictions: BTreeMap<(u32, String, String), Prediction>,
    /// Latest prediction per (question id, model id).
    pub final_answers: PredictionTable,
    /// `None` while the run is incomplete.
    pub termination: Option<Termination>,
}

impl RunOutcome {
    pub fn new(participants: Vec<String>) -> Self {
        RunOutcome {
            participants,
            partitions: Vec::new(),
            predictions: BTreeMap::new(),
            final_answers: PredictionTable::new(),
            termination: None,
        }
    }

    pub fn insert(&mut self, p: Prediction) {
        let key = (p.question_id.clone(), p.model_id.clone());
        let newer = self.final_answers.get(&key).is_none_or(|old| old.round <= p.round);
        if newer {
            self.final_answers.insert(key, p.clone());
        }
        self.predictions
            .insert((p.round, p.question_id.clone(), p.model_id.clone()), p);
    }

    pub fn prediction(&self, round: u32, question_id: &str, model_id: &str) -> Option<&Prediction> {
        self.predictions
            .get(&(round, question_id.to_string(), model_id.to_string()))
    }

    /// Number of collaboration rounds with a recorded partition.
    pub fn collaboration_rounds(&self) -> u32 {
        self.partitions.len().saturating_sub(1) as u32
    }

    pub fn initial_partition(&self) -> Option<&RoundPartition> {
        self.partitions.first()
    }

    pub fn final_partition(&self) -> Option<&RoundPartition> {
        self.partitions.last()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{question}/{model}: {source}")]
    Unit {
        question: String,
        model: String,
        #[source]
        source: Box<ScError>,
    },
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("transcript for {question}: {message}")]
    Transcript { question: String, message: String },
    #[error("invalid run setup: {0}")]
    Setup(String),
    #[error("run interrupted")]
    Cancelled,
}

/// Labels entries "Expert 1".."Expert k" in roster order, skipping
/// abstentions. Model names never appear.
pub fn build_transcript(
    q: &Question,
    participants: &[String],
    latest: &PredictionTable,
) -> Result<Transcript, EngineError> {
    let mut entries = Vec::new();
    let mut source_round = 0;
    for m in participants {
        let Some(p) = latest.get(&(q.id.clone(), m.clone())) else {
            return Err(EngineError::Transcript {
                question: q.id.clone(),
                message: format!("no prediction from {m}"),
            });
        };
        source_round = source_round.max(p.round);
        if let Some(answer) = p.majority {
            entries.push(TranscriptEntry {
                label: format!("Expert {}", entries.len() + 1),
                answer,
                summary: p.summary.clone(),
            });
        }
    }
    if entries.len() < 2 {
        return Err(EngineError::Transcript {
            question: q.id.clone(),
            message: format!("{} usable prediction(s); at least 2 are required", entries.len()),
        });
    }
    Ok(Transcript {
        question_id: q.id.clone(),
        source_round,
        entries,
    })
}

#[derive(Debug, Clone)]
pub enum Progress {
    RoundStarted {
        round: u32,
        questions: usize,
    },
    UnitFinished {
        round: u32,
        question_id: String,
        model_id: String,
    },
    Partitioned(RoundPartition),
    Skipped {
        round: u32,
        question_id: String,
        reason: String,
    },
}

pub type ProgressHook = Arc<dyn Fn(&Progress) + Send + Sync>;

#[derive(Clone, Default)]
pub struct EngineOptions {
    pub scope: SummarizeScope,
    /// (question, model) units in flight at once. Gateway calls are capped
    /// separately by the gateway.
    pub unit_parallelism: usize,
    pub cancel: Option<Arc<AtomicBool>>,
    pub progress: Option<ProgressHook>,
}

pub struct Engine<'a> {
    pub questions: &'a QuestionSet,
    pub participants: &'a [ModelProfile],
    pub summarizer: &'a ModelProfile,
    pub gateway: &'a Gateway,
    pub forge: &'a PromptForge,
    pub config: LoopConfig,
    pub options: EngineOptions,
}

struct Unit<'q> {
    question: &'q Question,
    model: usize,
    transcript: Option<Transcript>,
    prior: Option<Letter>,
}

impl Engine<'_> {
    pub fn participant_ids(&self) -> Vec<String> {
        self.participants.iter().map(|p| p.model_id.clone()).collect()
    }

    fn check_setup(&self) -> Result<(), EngineError> {
        if self.participants.len() < 2 {
            return Err(EngineError::Setup(format!(
                "at least 2 participants are required, got {}",
                self.participants.len()
            )));
        }
        if self.questions.is_empty() {
            return Err(EngineError::Setup("question set is empty".into()));
        }
        if self.summarizer.role != Role::Summarizer {
            return Err(EngineError::Setup(format!(
                "`{}` does not have the summarizer role",
                self.summarizer.model_id
            )));
        }
        let mut ids = self.participant_ids();
        ids.sort();
        ids.dedup();
        if ids.len() != self.participants.len() {
            return Err(EngineError::Setup("participant model ids must be unique".into()));
        }
        self.config.validate().map_err(EngineError::Setup)
    }

    fn emit(&self, p: Progress) {
        if let Some(hook) = &self.options.progress {
            hook(&p);
        }
    }

    fn cancelled(&self) -> bool {
        self.options.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst))
    }

    /// Runs units concurrently and records their results in unit order, so
    /// the event log is independent of scheduling.
    async fn run_units(
        &self,
        units: Vec<Unit<'_>>,
        round: u32,
        cache: &GenerationCache,
        recorder: &mut Recorder,
    ) -> Result<Vec<Prediction>, EngineError> {
        let ctx = ScContext {
            gateway: self.gateway,
            forge: self.forge,
            cache,
            scope: self.options.scope,
        };
        let ctx = &ctx;
        let width = self.options.unit_parallelism.max(1);
        let mut results = stream::iter(units)
            .map(|unit| async move {
                if self.cancelled() {
                    return (unit.question, unit.model, Err(None));
                }
                let model = &self.participants[unit.model];
                let mode = match &unit.transcript {
                    None => Mode::Initial,
                    Some(t) => Mode::Review {
                        transcript: t,
                        prior: unit.prior,
                    },
                };
                let out = ctx
                    .run_zscot_sc(unit.question, model, self.config.n, self.summarizer, mode, round)
                    .await;
                (unit.question, unit.model, out.map_err(Some))
            })
            .buffered(width);

        let mut predictions = Vec::new();
        let mut failure: Option<EngineError> = None;
        while let Some((question, model, out)) = results.next().await {
            if failure.is_some() {
                // drain in-flight work; nothing after the first failure is logged
                continue;
            }
            match out {
                Ok(ScOutput {
                    prediction,
                    generations,
                }) => {
                    let mut batch: Vec<EventRecord> = generations.iter().map(EventRecord::from_generation).collect();
                    batch.push(EventRecord::Prediction {
                        prediction: prediction.clone(),
                    });
                    recorder.record(batch, &generations)?;
                    self.emit(Progress::UnitFinished {
                        round,
                        question_id: question.id.clone(),
                        model_id: self.participants[model].model_id.clone(),
                    });
                    predictions.push(prediction);
                }
                Err(None) => failure = Some(EngineError::Cancelled),
                Err(Some(source)) => {
                    failure = Some(EngineError::Unit {
                        question: question.id.clone(),
                        model: self.participants[model].model_id.clone(),
                        source: Box::new(source),
                    })
                }
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(predictions),
        }
    }

    /// Initial self-consistency over every question and participant.
    pub async fn run_initial(
        &self,
        cache: &GenerationCache,
        recorder: &mut Recorder,
    ) -> Result<Vec<Prediction>, EngineError> {
        self.emit(Progress::RoundStarted {
            round: 0,
            questions: self.questions.len(),
        });
        let units = self
            .questions
            .questions
            .iter()
            .flat_map(|q| {
                (0..self.participants.len()).map(move |model| Unit {
                    question: q,
                    model,
                    transcript: None,
                    prior: None,
                })
            })
            .collect();
        self.run_units(units, 0, cache, recorder).await
    }

    /// One review round over `disagreed`, with transcripts built from
    /// `latest`. Questions without a usable transcript are skipped and keep
    /// their previous predictions.
    pub async fn run_round(
        &self,
        disagreed: &[String],
        latest: &PredictionTable,
        round: u32,
        cache: &GenerationCache,
        recorder: &mut Recorder,
    ) -> Result<Vec<Prediction>, EngineError> {
        if round == 0 {
            return Err(EngineError::Setup("review rounds start at 1".into()));
        }
        let ids = self.participant_ids();
        self.emit(Progress::RoundStarted {
            round,
            questions: disagreed.len(),
        });
        let mut units = Vec::new();
        for qid in disagreed {
            let q = self.questions.get(qid).ok_or_else(|| EngineError::Transcript {
                question: qid.clone(),
                message: "not in the question set".into(),
            })?;
            let transcript = match build_transcript(q, &ids, latest) {
                Ok(t) => t,
                Err(e) => {
                    tracing::warn!(question = %qid, round, error = %e, "skipping review");
                    self.emit(Progress::Skipped {
                        round,
                        question_id: qid.clone(),
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            for (model, id) in ids.iter().enumerate() {
                let prior = latest.get(&(qid.clone(), id.clone())).and_then(|p| p.majority);
                units.push(Unit {
                    question: q,
                    model,
                    transcript: Some(transcript.clone()),
                    prior,
                });
            }
        }
        self.run_units(units, round, cache, recorder).await
    }

    /// Full run: initial round, then review rounds while the consensus rate
    /// is below the threshold and the round cap allows.
    pub async fn run_collaboration(
        &self,
        cache: &GenerationCache,
        recorder: &mut Recorder,
    ) -> Result<RunOutcome, EngineError> {
        self.check_setup()?;
        let ids = self.participant_ids();
        let mut outcome = RunOutcome::new(ids.clone());

        for p in self.run_initial(cache, recorder).await? {
            outcome.insert(p);
        }
        let mut current = consensus::partition(self.questions, &ids, &outcome.final_answers, 0)?;
        self.record_partition(&mut outcome, current.clone(), recorder)?;

        let mut round = 0;
        while current.consensus_rate < self.config.threshold && round < self.config.max_rounds {
            round += 1;
            let updated = self
                .run_round(&current.disagreed_ids, &outcome.final_answers, round, cache, recorder)
                .await?;
            for p in updated {
                outcome.insert(p);
            }
            // Questions already in consensus are frozen; only re-split the
            // ones reviewed this round.
            let reviewed = QuestionSet {
                source: String::new(),
                questions: self
                    .questions
                    .questions
                    .iter()
                    .filter(|q| current.disagreed_ids.contains(&q.id))
                    .cloned()
                    .collect(),
            };
            let mut consensus_ids: Vec<String> = current.consensus_ids.clone();
            let mut disagreed_ids = Vec::new();
            if !reviewed.is_empty() {
                let sub = consensus::partition(&reviewed, &ids, &outcome.final_answers, round)?;
                consensus_ids.extend(sub.consensus_ids);
                disagreed_ids = sub.disagreed_ids;
            }
            let order: BTreeMap<&str, usize> = self.questions.ids().enumerate().map(|(i, id)| (id, i)).collect();
            consensus_ids.sort_by_key(|id| order[id.as_str()]);
            let rate = consensus::consensus_rate(consensus_ids.len(), self.questions.len());
            current = RoundPartition {
                round,
                consensus_ids,
                disagreed_ids,
                consensus_rate: rate,
            };
            self.record_partition(&mut outcome, current.clone(), recorder)?;
        }

        let termination = if current.consensus_rate >= self.config.threshold {
            Termination::ThresholdMet
        } else {
            Termination::RoundCapReached
        };
        recorder.record(
            vec![EventRecord::Termination {
                termination,
                rounds: round,
            }],
            &[],
        )?;
        outcome.termination = Some(termination);
        Ok(outcome)
    }

    fn record_partition(
        &self,
        outcome: &mut RunOutcome,
        partition: RoundPartition,
        recorder: &mut Recorder,
    ) -> Result<(), EngineError> {
        recorder.record(
            vec![EventRecord::Partition {
                partition: partition.clone(),
            }],
            &[],
        )?;
        self.emit(Progress::Partitioned(partition.clone()));
        outcome.partitions.push(partition);
        Ok(())
    }
}
