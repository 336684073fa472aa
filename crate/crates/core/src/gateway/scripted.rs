//! Deterministic offline backend.
//!
//! Every draw comes from a counter-based generator: SHA-256 over the seed and
//! the generation coordinates (question, model, round, sample). Completions are
//! therefore a pure function of (key, seed, behavior table) and do not depend
//! on call order, concurrency or wall-clock time. The reasoning and answer
//! turns of one sample share a draw, so they agree on the letter.

use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Completion, GenerationKey, GenerationRequest, RequestContext, Stage};
use crate::dataset::Letter;

pub const INVALID: &str = "invalid";

/// How one model answers one question.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Behavior {
    /// Weights over answer tokens (`"A"`..`"Z"` or `"invalid"`). Empty means
    /// uniform over the question's choices.
    pub distribution: BTreeMap<String, f64>,
    /// Fixed answer token per sample index, cycled. Takes precedence over
    /// `distribution` when non-empty.
    pub sequence: Vec<String>,
    /// Per-sample probability of adopting the transcript's leading answer
    /// during review when it differs from this model's prior answer.
    pub sway: f64,
    /// Number of review rounds during which the model keeps its prior answer
    /// regardless of `sway`.
    pub hold_rounds: u32,
}

impl Behavior {
    fn validate(&self, at: &str) -> Result<(), String> {
        for token in self.distribution.keys().chain(self.sequence.iter()) {
            if token != INVALID && token.parse::<Letter>().is_err() {
                return Err(format!("{at}: bad answer token `{token}`"));
            }
        }
        if self.distribution.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(format!("{at}: weights must be finite and non-negative"));
        }
        if !self.distribution.is_empty() && self.distribution.values().sum::<f64>() <= 0.0 {
            return Err(format!("{at}: weights sum to zero"));
        }
        if !(0.0..=1.0).contains(&self.sway) {
            return Err(format!("{at}: sway must be within [0, 1]"));
        }
        Ok(())
    }
}

fn default_reasoning_template() -> String {
    "the key findings fit option {letter} best. The remaining options explain less of the presentation.".into()
}

fn default_review_template() -> String {
    "After weighing the experts' reasoning, option {letter} is the best supported answer.".into()
}

fn default_summary_max_chars() -> usize {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorTable {
    #[serde(default)]
    pub default: Behavior,
    #[serde(default)]
    pub questions: BTreeMap<String, Behavior>,
    /// Reasoning text for initial samples; `{letter}` and `{sample}` are
    /// substituted.
    #[serde(default = "default_reasoning_template")]
    pub reasoning_template: String,
    /// Reasoning text following the letter in review completions.
    #[serde(default = "default_review_template")]
    pub review_template: String,
    /// Cap on scripted summaries, in characters.
    #[serde(default = "default_summary_max_chars")]
    pub summary_max_chars: usize,
}

impl Default for BehaviorTable {
    fn default() -> Self {
        BehaviorTable {
            default: Behavior::default(),
            questions: BTreeMap::new(),
            reasoning_template: default_reasoning_template(),
            review_template: default_review_template(),
            summary_max_chars: default_summary_max_chars(),
        }
    }
}

impl BehaviorTable {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let table: BehaviorTable = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.default.validate("default")?;
        for (id, b) in &self.questions {
            b.validate(id)?;
        }
        Ok(())
    }

    pub fn behavior(&self, question_id: &str) -> &Behavior {
        self.questions.get(question_id).unwrap_or(&self.default)
    }
}

pub(crate) fn mix_seed(run_seed: u64, profile_seed: u64) -> u64 {
    let digest = Sha256::new()
        .chain_update(b"icf-seed")
        .chain_update(run_seed.to_le_bytes())
        .chain_update(profile_seed.to_le_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Uniform draw in [0, 1) for the given coordinates.
fn unit(seed: u64, key: &GenerationKey, salt: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [key.question_id.as_bytes(), key.model_id.as_bytes(), salt.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(key.round.to_le_bytes());
    h.update(key.sample_index.to_le_bytes());
    let digest = h.finalize();
    let bits = u64::from_le_bytes(digest[..8].try_into().unwrap()) >> 11;
    bits as f64 / (1u64 << 53) as f64
}

/// An answer token resolved against the question: a letter or unparsable text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pick {
    Letter(Letter),
    Invalid,
}

fn token_pick(token: &str) -> Pick {
    token.parse::<Letter>().map(Pick::Letter).unwrap_or(Pick::Invalid)
}

/// First sentence of `text`, ending at `.`, `!` or `?` followed by whitespace
/// or the end of the text.
pub fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => return text,
                Some((_, next)) if next.is_whitespace() => return &text[..i + c.len_utf8()],
                _ => {}
            }
        }
    }
    text
}

/// Deduplicated first sentences joined by a space, cut to `max_chars`.
pub fn extractive_summary(reasonings: &[String], max_chars: usize) -> String {
    let mut seen: Vec<&str> = Vec::new();
    for r in reasonings {
        let s = first_sentence(r);
        if !s.is_empty() && !seen.contains(&s) {
            seen.push(s);
        }
    }
    let joined = seen.join(" ");
    match joined.char_indices().nth(max_chars) {
        Some((cut, _)) => joined[..cut].trim_end().to_string(),
        None => joined,
    }
}

/// Most frequent letter; ties go to the alphabetically smallest.
fn leading_answer(answers: &[Letter]) -> Option<(Letter, usize)> {
    let mut counts: BTreeMap<Letter, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(*a).or_default() += 1;
    }
    let mut best: Option<(Letter, usize)> = None;
    for (letter, count) in counts {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((letter, count));
        }
    }
    best
}

pub struct ScriptedBackend {
    table: BehaviorTable,
    seed: u64,
}

impl ScriptedBackend {
    pub fn new(table: BehaviorTable, seed: u64) -> Self {
        ScriptedBackend { table, seed }
    }

    fn draw_initial(&self, key: &GenerationKey, choices: &[Letter]) -> Pick {
        let behavior = self.table.behavior(&key.question_id);
        if !behavior.sequence.is_empty() {
            let token = &behavior.sequence[key.sample_index as usize % behavior.sequence.len()];
            return token_pick(token);
        }
        let u = unit(self.seed, key, "answer");
        if behavior.distribution.is_empty() {
            if choices.is_empty() {
                return Pick::Invalid;
            }
            let i = ((u * choices.len() as f64) as usize).min(choices.len() - 1);
            return Pick::Letter(choices[i]);
        }
        let total: f64 = behavior.distribution.values().sum();
        let mut acc = 0.0;
        let mut last = Pick::Invalid;
        for (token, weight) in &behavior.distribution {
            if *weight <= 0.0 {
                continue;
            }
            acc += weight / total;
            last = token_pick(token);
            if u < acc {
                return last;
            }
        }
        last
    }

    fn draw_review(
        &self,
        key: &GenerationKey,
        choices: &[Letter],
        transcript: &[Letter],
        prior: Option<Letter>,
    ) -> Pick {
        let behavior = self.table.behavior(&key.question_id);
        let Some(prior) = prior else {
            return self.draw_initial(key, choices);
        };
        if key.round <= behavior.hold_rounds {
            return Pick::Letter(prior);
        }
        match leading_answer(transcript) {
            Some((leader, leader_count)) => {
                let prior_count = transcript.iter().filter(|a| **a == prior).count();
                let differs = leader != prior && leader_count > prior_count;
                if differs && unit(self.seed, key, "sway") < behavior.sway {
                    Pick::Letter(leader)
                } else {
                    Pick::Letter(prior)
                }
            }
            None => Pick::Letter(prior),
        }
    }

    fn reasoning_text(&self, pick: Pick, key: &GenerationKey) -> String {
        match pick {
            Pick::Letter(l) => self
                .table
                .reasoning_template
                .replace("{letter}", &l.to_string())
                .replace("{sample}", &(key.sample_index + 1).to_string()),
            Pick::Invalid => "the findings are ambiguous and no single option stands out.".into(),
        }
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    async fn complete(&self, request: &GenerationRequest<'_>) -> Result<Completion, BackendError> {
        let key = request.key;
        let text = match (key.stage, request.context) {
            (Stage::Reasoning, RequestContext::Sample { choices }) => {
                self.reasoning_text(self.draw_initial(key, choices), key)
            }
            (Stage::Answer, RequestContext::Sample { choices }) => match self.draw_initial(key, choices) {
                Pick::Letter(l) => format!("{l}."),
                Pick::Invalid => "unclear.".into(),
            },
            (
                Stage::Review,
                RequestContext::Review {
                    choices,
                    transcript_answers,
                    prior,
                },
            ) => match self.draw_review(key, choices, transcript_answers, *prior) {
                Pick::Letter(l) => format!(
                    "{l}. {}",
                    self.table.review_template.replace("{letter}", &l.to_string())
                ),
                Pick::Invalid => "unclear. The experts' arguments do not settle the question.".into(),
            },
            (Stage::Summary, RequestContext::Summary { reasonings, .. }) => {
                extractive_summary(reasonings, self.table.summary_max_chars)
            }
            (stage, _) => {
                return Err(BackendError::Malformed(format!(
                    "scripted backend received a {stage:?} request without matching context"
                )))
            }
        };
        Ok(Completion {
            text,
            meta: "scripted".into(),
        })
    }
}
