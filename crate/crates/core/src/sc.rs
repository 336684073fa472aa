//! Zero-shot chain-of-thought with self-consistency: sample `n` reasonings and
//! answers per (question, model), take the majority letter, and summarize the
//! reasonings behind it.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::collab::Transcript;
use crate::dataset::{Letter, Question};
use crate::gateway::{Gateway, GenerationError, GenerationKey, ModelProfile, RequestContext, Role, Stage};
use crate::prompt::{PromptError, PromptForge, RenderedPrompt};

/// Letter extracted from one completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extracted {
    Letter(Letter),
    Invalid(String),
}

impl Extracted {
    pub fn letter(&self) -> Option<Letter> {
        match self {
            Extracted::Letter(l) => Some(*l),
            Extracted::Invalid(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_index: u32,
    pub reasoning: String,
    pub extracted: Extracted,
}

/// One model's self-consistent answer to one question in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub model_id: String,
    pub round: u32,
    /// `None` when the model abstained (no valid letter in any sample).
    pub majority: Option<Letter>,
    pub vote_count: u32,
    pub n: u32,
    pub samples: Vec<Sample>,
    pub summary: String,
}

impl Prediction {
    pub fn is_abstain(&self) -> bool {
        self.majority.is_none()
    }

    /// vote_count / n, the per-question consistency term.
    pub fn consistency(&self) -> f64 {
        self.vote_count as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vote {
    Majority { letter: Letter, count: u32 },
    Abstain,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// First standalone uppercase letter in `completion` that is one of `valid`.
/// Standalone means the neighbors on both sides are not word characters.
pub fn extract_letter(completion: &str, valid: &[Letter]) -> Extracted {
    if completion.trim().is_empty() {
        return Extracted::Invalid("empty completion".into());
    }
    let chars: Vec<char> = completion.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let Some(letter) = Letter::new(c) else { continue };
        let before = i.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i + 1).copied();
        if before.is_some_and(is_word_char) || after.is_some_and(is_word_char) {
            continue;
        }
        if valid.contains(&letter) {
            return Extracted::Letter(letter);
        }
    }
    Extracted::Invalid("no in-range letter".into())
}

/// Modal valid letter and its count; ties go to the alphabetically smallest
/// letter. Invalid entries are ignored.
pub fn majority_vote(letters: &[Extracted]) -> Vote {
    let mut counts: BTreeMap<Letter, u32> = BTreeMap::new();
    for l in letters.iter().filter_map(Extracted::letter) {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(Letter, u32)>, (letter, count)| match best {
            Some((_, c)) if c >= count => best,
            _ => Some((letter, count)),
        })
        .map_or(Vote::Abstain, |(letter, count)| Vote::Majority { letter, count })
}

/// Which reasonings go to the summarizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummarizeScope {
    /// Only samples whose answer matches the majority.
    #[default]
    MajorityOnly,
    /// Every sample's reasoning.
    AllSamples,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedGeneration {
    pub completion: String,
    pub attempt_count: u32,
    pub backend_meta: String,
}

/// Completed generations by key, used to replay a run without re-issuing
/// calls.
pub type GenerationCache = HashMap<GenerationKey, CachedGeneration>;

/// One generation as it goes to the event log. `latency` is `None` when the
/// result came from the cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRecord {
    pub key: GenerationKey,
    pub completion: String,
    pub attempt_count: u32,
    pub backend_meta: String,
    pub latency: Option<Duration>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScError {
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("rendering prompt for {key}: {source}")]
    Prompt {
        key: GenerationKey,
        #[source]
        source: PromptError,
    },
    #[error("{0}")]
    Precondition(String),
}

/// Everything a self-consistency run needs besides the question and models.
pub struct ScContext<'a> {
    pub gateway: &'a Gateway,
    pub forge: &'a PromptForge,
    pub cache: &'a GenerationCache,
    pub scope: SummarizeScope,
}

pub enum Mode<'a> {
    Initial,
    /// Review against a transcript; `prior` is this model's previous majority.
    Review {
        transcript: &'a Transcript,
        prior: Option<Letter>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScOutput {
    pub prediction: Prediction,
    /// Sorted by key.
    pub generations: Vec<GenerationRecord>,
}

impl ScContext<'_> {
    async fn generate(
        &self,
        profile: &ModelProfile,
        prompt: &RenderedPrompt,
        key: GenerationKey,
        context: &RequestContext,
    ) -> Result<GenerationRecord, ScError> {
        if let Some(hit) = self.cache.get(&key) {
            return Ok(GenerationRecord {
                key,
                completion: hit.completion.clone(),
                attempt_count: hit.attempt_count,
                backend_meta: hit.backend_meta.clone(),
                latency: None,
            });
        }
        let result = self.gateway.generate(profile, prompt, &key, context).await?;
        Ok(GenerationRecord {
            key,
            completion: result.completion,
            attempt_count: result.attempt_count,
            backend_meta: result.backend_meta,
            latency: Some(result.latency),
        })
    }

    async fn initial_sample(
        &self,
        q: &Question,
        model: &ModelProfile,
        round: u32,
        index: u32,
    ) -> Result<(Sample, Vec<GenerationRecord>), ScError> {
        let key = |stage| GenerationKey {
            question_id: q.id.clone(),
            model_id: model.model_id.clone(),
            round,
            sample_index: index,
            stage,
        };
        let letters: Vec<Letter> = q.letters().collect();
        let context = RequestContext::Sample {
            choices: letters.clone(),
        };

        let reasoning_key = key(Stage::Reasoning);
        let prompt = self
            .forge
            .render_reasoning(q, &model.dialect)
            .map_err(|source| ScError::Prompt {
                key: reasoning_key.clone(),
                source,
            })?;
        let reasoning = self.generate(model, &prompt, reasoning_key, &context).await?;
        let reasoning_text = reasoning.completion.trim().to_string();
        if reasoning_text.is_empty() {
            let sample = Sample {
                sample_index: index,
                reasoning: reasoning_text,
                extracted: Extracted::Invalid("empty reasoning".into()),
            };
            return Ok((sample, vec![reasoning]));
        }

        let answer_key = key(Stage::Answer);
        let prompt = self
            .forge
            .render_answer(q, &reasoning_text, &model.dialect)
            .map_err(|source| ScError::Prompt {
                key: answer_key.clone(),
                source,
            })?;
        let answer = self.generate(model, &prompt, answer_key, &context).await?;
        let sample = Sample {
            sample_index: index,
            extracted: extract_letter(&answer.completion, &letters),
            reasoning: reasoning_text,
        };
        Ok((sample, vec![reasoning, answer]))
    }

    async fn review_sample(
        &self,
        q: &Question,
        model: &ModelProfile,
        round: u32,
        index: u32,
        prompt: &RenderedPrompt,
        context: &RequestContext,
    ) -> Result<(Sample, Vec<GenerationRecord>), ScError> {
        let key = GenerationKey {
            question_id: q.id.clone(),
            model_id: model.model_id.clone(),
            round,
            sample_index: index,
            stage: Stage::Review,
        };
        let letters: Vec<Letter> = q.letters().collect();
        let record = self.generate(model, prompt, key, context).await?;
        let sample = Sample {
            sample_index: index,
            reasoning: record.completion.trim().to_string(),
            extracted: extract_letter(&record.completion, &letters),
        };
        Ok((sample, vec![record]))
    }

    /// Condenses `reasonings` with the summarizer.
    pub async fn summarize(
        &self,
        majority: Letter,
        reasonings: &[String],
        summarizer: &ModelProfile,
        key: GenerationKey,
    ) -> Result<GenerationRecord, ScError> {
        if reasonings.is_empty() {
            return Err(ScError::Precondition("no reasonings to summarize".into()));
        }
        let prompt = self
            .forge
            .render_summary(majority, reasonings, &summarizer.dialect)
            .map_err(|source| ScError::Prompt {
                key: key.clone(),
                source,
            })?;
        let context = RequestContext::Summary {
            majority,
            reasonings: reasonings.to_vec(),
        };
        self.generate(summarizer, &prompt, key, &context).await
    }

    /// Samples `n` answers from `model`, votes, and summarizes.
    pub async fn run_zscot_sc(
        &self,
        q: &Question,
        model: &ModelProfile,
        n: u32,
        summarizer: &ModelProfile,
        mode: Mode<'_>,
        round: u32,
    ) -> Result<ScOutput, ScError> {
        if n == 0 {
            return Err(ScError::Precondition("n must be at least 1".into()));
        }
        if summarizer.role != Role::Summarizer {
            return Err(ScError::Precondition(format!(
                "`{}` is not a summarizer",
                summarizer.model_id
            )));
        }

        let results = match mode {
            Mode::Initial => join_all((0..n).map(|i| self.initial_sample(q, model, round, i))).await,
            Mode::Review { transcript, prior } => {
                let key = GenerationKey {
                    question_id: q.id.clone(),
                    model_id: model.model_id.clone(),
                    round,
                    sample_index: 0,
                    stage: Stage::Review,
                };
                let prompt = self
                    .forge
                    .render_review(q, transcript, &model.dialect)
                    .map_err(|source| ScError::Prompt { key, source })?;
                let context = RequestContext::Review {
                    choices: q.letters().collect(),
                    transcript_answers: transcript.entries.iter().map(|e| e.answer).collect(),
                    prior,
                };
                join_all((0..n).map(|i| self.review_sample(q, model, round, i, &prompt, &context))).await
            }
        };

        let mut samples = Vec::with_capacity(n as usize);
        let mut generations = Vec::new();
        for r in results {
            let (sample, records) = r?;
            samples.push(sample);
            generations.extend(records);
        }

        let extracted: Vec<Extracted> = samples.iter().map(|s| s.extracted.clone()).collect();
        let (majority, vote_count, summary) = match majority_vote(&extracted) {
            Vote::Abstain => (None, 0, String::new()),
            Vote::Majority { letter, count } => {
                let reasonings: Vec<String> = samples
                    .iter()
                    .filter(|s| match self.scope {
                        SummarizeScope::MajorityOnly => s.extracted.letter() == Some(letter),
                        SummarizeScope::AllSamples => true,
                    })
                    .map(|s| s.reasoning.clone())
                    .filter(|r| !r.is_empty())
                    .collect();
                let key = GenerationKey {
                    question_id: q.id.clone(),
                    model_id: model.model_id.clone(),
                    round,
                    sample_index: 0,
                    stage: Stage::Summary,
                };
                let summary = if reasonings.is_empty() {
                    String::new()
                } else {
                    let record = self.summarize(letter, &reasonings, summarizer, key).await?;
                    let text = record.completion.trim().to_string();
                    generations.push(record);
                    text
                };
                (Some(letter), count, summary)
            }
        };
        generations.sort_by(|a, b| a.key.cmp(&b.key));

        Ok(ScOutput {
            prediction: Prediction {
                question_id: q.id.clone(),
                model_id: model.model_id.clone(),
                round,
                majority,
                vote_count,
                n,
                samples,
                summary,
            },
            generations,
        })
    }
}
