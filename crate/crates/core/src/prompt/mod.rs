//! Prompt rendering for the reasoning, answer, review and summary turns.

mod dialect;
mod template;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dialect::{Dialect, DialectRegistry, MarkerStyle};
pub use template::{Placeholder, Template, TemplateError, TemplateKind};

use crate::collab::Transcript;
use crate::dataset::{Letter, Question};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerRole {
    System,
    User,
    AssistantPrefix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub role: SpeakerRole,
    pub text: String,
}

/// A prompt ready for a backend: structured turns plus their flattened text
/// under the dialect's markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub dialect_id: String,
    pub segments: Vec<Segment>,
    pub text: String,
}

impl RenderedPrompt {
    pub fn assistant_prefix(&self) -> Option<&str> {
        self.segments
            .last()
            .filter(|s| s.role == SpeakerRole::AssistantPrefix)
            .map(|s| s.text.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown dialect `{0}`")]
    UnknownDialect(String),
    #[error("reasoning text is empty")]
    EmptyReasoning,
    #[error("transcript has {0} entries; at least 2 are required")]
    TranscriptTooSmall(usize),
    #[error("no reasonings to summarize")]
    NoReasonings,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub reasoning: Template,
    pub answer: Template,
    pub review: Template,
    pub summary: Template,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            reasoning: Template::builtin(TemplateKind::Reasoning),
            answer: Template::builtin(TemplateKind::Answer),
            review: Template::builtin(TemplateKind::Review),
            summary: Template::builtin(TemplateKind::Summary),
        }
    }
}

impl Templates {
    /// Built-in templates, overridden by any of `reasoning.txt`, `answer.txt`,
    /// `review.txt`, `summary.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut templates = Templates::default();
        for kind in TemplateKind::ALL {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let parsed = Template::parse(kind, &text)?;
            match kind {
                TemplateKind::Reasoning => templates.reasoning = parsed,
                TemplateKind::Answer => templates.answer = parsed,
                TemplateKind::Review => templates.review = parsed,
                TemplateKind::Summary => templates.summary = parsed,
            }
        }
        Ok(templates)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PromptForge {
    pub templates: Templates,
    pub dialects: DialectRegistry,
}

struct Fill<'a> {
    question: Option<&'a Question>,
    reasoning: &'a str,
    reasonings: &'a [String],
    majority: Option<Letter>,
    transcript: Option<&'a Transcript>,
}

impl Fill<'_> {
    fn value(&self, p: Placeholder) -> String {
        match p {
            Placeholder::Question => self.question.map(|q| q.stem.clone()).unwrap_or_default(),
            Placeholder::Choices => self.question.map(choices_block).unwrap_or_default(),
            Placeholder::FirstLetter => self.question.map(|q| q.first_letter().to_string()).unwrap_or_default(),
            Placeholder::LastLetter => self.question.map(|q| q.last_letter().to_string()).unwrap_or_default(),
            Placeholder::Reasoning => self.reasoning.to_string(),
            Placeholder::Reasonings => reasonings_block(self.reasonings),
            Placeholder::Majority => self.majority.map(|l| l.to_string()).unwrap_or_default(),
            Placeholder::Transcript => self.transcript.map(transcript_block).unwrap_or_default(),
        }
    }
}

fn choices_block(q: &Question) -> String {
    q.choices
        .iter()
        .map(|(letter, text)| format!("{letter}. {text}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn reasonings_block(reasonings: &[String]) -> String {
    reasonings
        .iter()
        .enumerate()
        .map(|(i, r)| format!("Response {}: {}", i + 1, r.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn transcript_block(t: &Transcript) -> String {
    t.entries
        .iter()
        .map(|e| format!("{}: ({}) {}", e.label, e.answer, e.summary.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

impl PromptForge {
    pub fn new(templates: Templates, dialects: DialectRegistry) -> Self {
        PromptForge { templates, dialects }
    }

    fn dialect(&self, id: &str) -> Result<&Dialect, PromptError> {
        self.dialects
            .get(id)
            .ok_or_else(|| PromptError::UnknownDialect(id.into()))
    }

    fn assemble(
        &self,
        dialect: &Dialect,
        template: &Template,
        fill: &Fill<'_>,
        assistant_override: Option<String>,
    ) -> RenderedPrompt {
        let f = |p| fill.value(p);
        let mut segments = Vec::with_capacity(3);
        if let Some(s) = &template.system {
            segments.push(Segment {
                role: SpeakerRole::System,
                text: s.render(&f),
            });
        }
        if let Some(s) = &template.user {
            segments.push(Segment {
                role: SpeakerRole::User,
                text: s.render(&f),
            });
        }
        let assistant = assistant_override.or_else(|| template.assistant.as_ref().map(|s| s.render(&f)));
        if let Some(text) = assistant {
            segments.push(Segment {
                role: SpeakerRole::AssistantPrefix,
                text,
            });
        }
        let text = flatten(dialect, &segments);
        RenderedPrompt {
            dialect_id: dialect.id.clone(),
            segments,
            text,
        }
    }

    pub fn render_reasoning(&self, q: &Question, dialect_id: &str) -> Result<RenderedPrompt, PromptError> {
        let dialect = self.dialect(dialect_id)?;
        let fill = Fill {
            question: Some(q),
            reasoning: "",
            reasonings: &[],
            majority: None,
            transcript: None,
        };
        Ok(self.assemble(dialect, &self.templates.reasoning, &fill, None))
    }

    /// The reasoning prompt with the sampled reasoning and the answer cue
    /// appended to the assistant turn.
    pub fn render_answer(
        &self,
        q: &Question,
        reasoning: &str,
        dialect_id: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        let dialect = self.dialect(dialect_id)?;
        if reasoning.trim().is_empty() {
            return Err(PromptError::EmptyReasoning);
        }
        let fill = Fill {
            question: Some(q),
            reasoning: reasoning.trim(),
            reasonings: &[],
            majority: None,
            transcript: None,
        };
        let f = |p| fill.value(p);
        let lead = self
            .templates
            .reasoning
            .assistant
            .as_ref()
            .map(|s| s.render(&f))
            .unwrap_or_default();
        let cue = self
            .templates
            .answer
            .assistant
            .as_ref()
            .map(|s| s.render(&f))
            .unwrap_or_default();
        let assistant = match (lead.is_empty(), cue.is_empty()) {
            (true, _) => cue,
            (false, true) => lead,
            (false, false) => format!("{lead} {cue}"),
        };
        Ok(self.assemble(dialect, &self.templates.reasoning, &fill, Some(assistant)))
    }

    pub fn render_review(&self, q: &Question, t: &Transcript, dialect_id: &str) -> Result<RenderedPrompt, PromptError> {
        let dialect = self.dialect(dialect_id)?;
        if t.entries.len() < 2 {
            return Err(PromptError::TranscriptTooSmall(t.entries.len()));
        }
        let fill = Fill {
            question: Some(q),
            reasoning: "",
            reasonings: &[],
            majority: None,
            transcript: Some(t),
        };
        Ok(self.assemble(dialect, &self.templates.review, &fill, None))
    }

    pub fn render_summary(
        &self,
        majority: Letter,
        reasonings: &[String],
        dialect_id: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        let dialect = self.dialect(dialect_id)?;
        if reasonings.is_empty() {
            return Err(PromptError::NoReasonings);
        }
        let fill = Fill {
            question: None,
            reasoning: "",
            reasonings,
            majority: Some(majority),
            transcript: None,
        };
        Ok(self.assemble(dialect, &self.templates.summary, &fill, None))
    }
}

fn flatten(dialect: &Dialect, segments: &[Segment]) -> String {
    match &dialect.markers {
        MarkerStyle::RoleTagged {
            system,
            user,
            assistant,
        } => segments
            .iter()
            .map(|s| {
                let marker = match s.role {
                    SpeakerRole::System => system,
                    SpeakerRole::User => user,
                    SpeakerRole::AssistantPrefix => assistant,
                };
                if s.text.is_empty() {
                    marker.clone()
                } else {
                    format!("{marker} {}", s.text)
                }
            })
            .collect::<Vec<_>>()
            .join("\n\n"),
        MarkerStyle::InstructionBracketed { open, close } => {
            let instruction = segments
                .iter()
                .filter(|s| s.role != SpeakerRole::AssistantPrefix)
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join("\n\n");
            let prefix = segments
                .iter()
                .find(|s| s.role == SpeakerRole::AssistantPrefix)
                .map(|s| s.text.as_str())
                .unwrap_or("");
            format!("{open} {instruction}\n\n{close}{prefix}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::TranscriptEntry;
    use crate::dataset::Step;

    fn question(n: usize) -> Question {
        Question {
            id: "q1".into(),
            step: Step::One,
            stem: "A 45-year-old man has crushing chest pain. Most likely diagnosis?".into(),
            choices: (0..n)
                .map(|i| (Letter::from_index(i).unwrap(), format!("Option {}", i + 1)))
                .collect(),
            answer_key: None,
            has_media: false,
        }
    }

    fn letter(c: char) -> Letter {
        Letter::new(c).unwrap()
    }

    fn transcript(answers: &[char]) -> Transcript {
        Transcript {
            question_id: "q1".into(),
            source_round: 0,
            entries: answers
                .iter()
                .enumerate()
                .map(|(i, a)| TranscriptEntry {
                    label: format!("Expert {}", i + 1),
                    answer: letter(*a),
                    summary: format!("Summary from expert {}.", i + 1),
                })
                .collect(),
        }
    }

    fn assert_letters_once_in_order(text: &str, n: usize) {
        let mut last = 0;
        for i in 0..n {
            let tag = format!("\n{}. ", Letter::from_index(i).unwrap());
            assert_eq!(text.matches(&tag).count(), 1, "{tag:?} in {text}");
            let pos = text.find(&tag).unwrap();
            assert!(pos > last);
            last = pos;
        }
    }

    #[test]
    fn reasoning_prompt_role_tagged() {
        let forge = PromptForge::default();
        let p = forge.render_reasoning(&question(5), "role_tagged").unwrap();
        assert_eq!(p.segments.len(), 3);
        assert_eq!(
            p.segments[0].text,
            "You are an expert medical professional who helps to reason multiple choice questions."
        );
        assert_eq!(p.assistant_prefix(), Some("Let us think step by step. First,"));
        assert!(p
            .text
            .starts_with("<|System|>: You are an expert medical professional who helps"));
        assert!(p.text.contains("<|Question|>: A 45-year-old"));
        assert!(p.text.ends_with("<|Assistant|>: Let us think step by step. First,"));
        assert!(p
            .text
            .contains("A. Option 1\nB. Option 2\nC. Option 3\nD. Option 4\nE. Option 5"));
        assert_letters_once_in_order(&p.text, 5);
        assert!(!p.text.contains("F. "));
        assert_eq!(p, forge.render_reasoning(&question(5), "role_tagged").unwrap());
    }

    #[test]
    fn two_choice_scaffold() {
        let forge = PromptForge::default();
        let p = forge.render_reasoning(&question(2), "role_tagged").unwrap();
        assert!(p.segments[1].text.ends_with("A. Option 1\nB. Option 2"));
        assert!(!p.text.contains("C. "));
    }

    #[test]
    fn answer_prompt_cue() {
        let forge = PromptForge::default();
        let p = forge
            .render_answer(&question(5), "the pain radiates to the left arm.", "role_tagged")
            .unwrap();
        assert_eq!(
            p.assistant_prefix().unwrap(),
            "Let us think step by step. First, the pain radiates to the left arm.\n\n\
             Therefore, among choice A through E, the answer (letter) is:"
        );
        let p = forge.render_answer(&question(2), "x", "role_tagged").unwrap();
        assert!(p.text.ends_with("among choice A through B, the answer (letter) is:"));
        assert_eq!(
            forge.render_answer(&question(2), "  ", "role_tagged"),
            Err(PromptError::EmptyReasoning)
        );
    }

    #[test]
    fn review_prompt_embeds_transcript() {
        let forge = PromptForge::default();
        let t = transcript(&['A', 'A', 'B']);
        let p = forge.render_review(&question(4), &t, "role_tagged").unwrap();
        assert!(p.segments[0]
            .text
            .starts_with("You are a medical professional who helps resolve disagreements"));
        let user = &p.segments[1].text;
        let e1 = user.find("Expert 1: (A) Summary from expert 1.").unwrap();
        let e2 = user.find("Expert 2: (A) Summary from expert 2.").unwrap();
        let e3 = user.find("Expert 3: (B) Summary from expert 3.").unwrap();
        assert!(e1 < e2 && e2 < e3);
        assert!(user.contains("expert 1.\n\nExpert 2:"));
        assert!(user.ends_with(
            "which do you agree with and why? Please first output the answer (letter) and then your reasoning:"
        ));
        assert_letters_once_in_order(&p.text, 4);
        assert!(p.text.ends_with("<|Assistant|>:"));
        assert_eq!(p, forge.render_review(&question(4), &t, "role_tagged").unwrap());

        assert_eq!(
            forge.render_review(&question(4), &transcript(&['A']), "role_tagged"),
            Err(PromptError::TranscriptTooSmall(1))
        );
    }

    #[test]
    fn summary_prompt_bracketed() {
        let forge = PromptForge::default();
        let reasonings: Vec<String> = (1..=6).map(|i| format!("reason number {i}.")).collect();
        let p = forge
            .render_summary(letter('A'), &reasonings, "instruction_bracketed")
            .unwrap();
        assert!(p.text.starts_with(
            "<s>[INST] You are an expert medical professional who helps to summarize opinions from a panel"
        ));
        for i in 1..=6 {
            assert!(p.text.contains(&format!("Response {i}: reason number {i}.")));
        }
        assert!(p.text.contains("Majority answer: A"));
        assert!(p
            .text
            .contains("extractively summarize their opinions into one paragraph.\n\n[/INST]Summary:"));
        assert!(p.text.ends_with("[/INST]Summary:"));

        let one = forge
            .render_summary(letter('B'), &["only one.".into()], "instruction_bracketed")
            .unwrap();
        assert!(one.text.contains("Response 1: only one."));
        assert_eq!(
            forge.render_summary(letter('A'), &[], "instruction_bracketed"),
            Err(PromptError::NoReasonings)
        );
    }

    #[test]
    fn unknown_dialect() {
        let forge = PromptForge::default();
        assert_eq!(
            forge.render_reasoning(&question(3), "nope"),
            Err(PromptError::UnknownDialect("nope".into()))
        );
        assert!(forge.render_summary(letter('A'), &["x".into()], "nope").is_err());
    }

    #[test]
    fn markers_verbatim_per_dialect() {
        let forge = PromptForge::default();
        let q = question(4);
        let tagged = forge.render_reasoning(&q, "role_tagged").unwrap();
        for m in ["<|System|>:", "<|Question|>:", "<|Assistant|>:"] {
            assert!(tagged.text.contains(m));
        }
        let bracketed = forge.render_reasoning(&q, "instruction_bracketed").unwrap();
        assert!(bracketed.text.starts_with("<s>[INST] "));
        assert!(bracketed.text.contains("[/INST]Let us think step by step. First,"));
        assert!(!bracketed.text.contains("<|System|>"));
    }

    #[test]
    fn assistant_prefix_is_last() {
        let forge = PromptForge::default();
        let q = question(3);
        let prompts = [
            forge.render_reasoning(&q, "role_tagged").unwrap(),
            forge.render_answer(&q, "r", "role_tagged").unwrap(),
            forge
                .render_review(&q, &transcript(&['A', 'B']), "role_tagged")
                .unwrap(),
            forge.render_summary(letter('A'), &["r".into()], "role_tagged").unwrap(),
        ];
        for p in prompts {
            let prefixes: Vec<usize> = p
                .segments
                .iter()
                .enumerate()
                .filter(|(_, s)| s.role == SpeakerRole::AssistantPrefix)
                .map(|(i, _)| i)
                .collect();
            assert!(prefixes.len() <= 1);
            if let Some(i) = prefixes.first() {
                assert_eq!(*i, p.segments.len() - 1);
            }
        }
    }

    #[test]
    fn templates_from_dir_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("reasoning.txt"),
            "[system]\nBe brief.\n[user]\n{question}\n{choices}\n[assistant]\nAnswer:",
        )
        .unwrap();
        let templates = Templates::from_dir(dir.path()).unwrap();
        let forge = PromptForge::new(templates, DialectRegistry::default());
        let p = forge.render_reasoning(&question(2), "role_tagged").unwrap();
        assert_eq!(p.segments[0].text, "Be brief.");
        assert_eq!(p.assistant_prefix(), Some("Answer:"));
        // untouched kinds keep their defaults
        assert_eq!(forge.templates.summary, Template::builtin(TemplateKind::Summary));

        std::fs::write(dir.path().join("summary.txt"), "{question}").unwrap();
        assert!(matches!(Templates::from_dir(dir.path()), Err(PromptError::Template(_))));
    }
}
