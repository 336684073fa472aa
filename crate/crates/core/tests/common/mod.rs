#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use icf_core::collab::{Engine, EngineOptions, LoopConfig, RunOutcome};
use icf_core::dataset::{Letter, Question, QuestionSet, Step};
use icf_core::gateway::{
    BackendSpec, Behavior, BehaviorSource, BehaviorTable, Gateway, ModelProfile, RetryPolicy, Role,
};
use icf_core::prompt::PromptForge;
use icf_core::run::RunSpec;
use icf_core::sc::{GenerationCache, SummarizeScope};
use icf_core::store::{EventStore, Recorder, RunEvent, StoreError};

pub fn letter(c: char) -> Letter {
    Letter::new(c).unwrap()
}

/// `count` questions with choices A to D, keyed A, steps cycling 1, 2, 3.
pub fn question_set(count: usize) -> QuestionSet {
    QuestionSet {
        source: "test".into(),
        questions: (0..count)
            .map(|i| Question {
                id: format!("q{i:02}"),
                step: Step::ALL[i % 3],
                stem: format!("Question number {i}?"),
                choices: "ABCD".chars().map(|c| (letter(c), format!("option {c}"))).collect(),
                answer_key: Some(letter('A')),
                has_media: false,
            })
            .collect(),
    }
}

pub fn fixed(token: &str, sway: f64) -> Behavior {
    Behavior {
        sequence: vec![token.to_string()],
        sway,
        ..Behavior::default()
    }
}

pub fn table(default: Behavior, questions: impl IntoIterator<Item = (String, Behavior)>) -> BehaviorTable {
    BehaviorTable {
        default,
        questions: questions.into_iter().collect::<BTreeMap<_, _>>(),
        ..BehaviorTable::default()
    }
}

pub fn agent(id: &str, table: BehaviorTable) -> ModelProfile {
    ModelProfile {
        model_id: id.into(),
        role: Role::Participant,
        backend: BackendSpec::Scripted {
            seed: 0,
            behavior: BehaviorSource::Inline(table),
        },
        temperature: 1.0,
        max_new_tokens: 256,
        dialect: "role_tagged".into(),
    }
}

pub fn summarizer() -> ModelProfile {
    ModelProfile {
        model_id: "summarizer".into(),
        role: Role::Summarizer,
        backend: BackendSpec::Scripted {
            seed: 0,
            behavior: BehaviorSource::Inline(BehaviorTable::default()),
        },
        temperature: 1.0,
        max_new_tokens: 256,
        dialect: "instruction_bracketed".into(),
    }
}

/// Event store whose contents stay visible to the test.
#[derive(Clone, Default)]
pub struct SharedLog(pub Arc<Mutex<Vec<RunEvent>>>);

impl EventStore for SharedLog {
    fn len(&self) -> u64 {
        self.0.lock().unwrap().len() as u64
    }

    fn append_batch(&mut self, events: &[RunEvent]) -> Result<(), StoreError> {
        let mut log = self.0.lock().unwrap();
        for (i, e) in events.iter().enumerate() {
            let expected = (log.len() + i) as u64;
            if e.seq != expected {
                return Err(StoreError::SequenceGap { expected, got: e.seq });
            }
        }
        log.extend_from_slice(events);
        Ok(())
    }
}

pub struct Society {
    pub questions: QuestionSet,
    pub participants: Vec<ModelProfile>,
    pub summarizer: ModelProfile,
    pub config: LoopConfig,
    pub seed: u64,
}

impl Society {
    pub fn new(questions: QuestionSet, participants: Vec<ModelProfile>, config: LoopConfig) -> Self {
        Society {
            questions,
            participants,
            summarizer: summarizer(),
            config,
            seed: 0,
        }
    }

    /// Runs entirely in memory and returns the outcome with the event log.
    pub async fn run(&self) -> (RunOutcome, Vec<RunEvent>) {
        let gateway = Gateway::from_profiles(
            self.participants.iter().chain([&self.summarizer]),
            self.seed,
            RetryPolicy::default(),
            8,
        )
        .unwrap();
        let forge = PromptForge::default();
        let engine = Engine {
            questions: &self.questions,
            participants: &self.participants,
            summarizer: &self.summarizer,
            gateway: &gateway,
            forge: &forge,
            config: self.config,
            options: EngineOptions {
                scope: SummarizeScope::MajorityOnly,
                unit_parallelism: 4,
                cancel: None,
                progress: None,
            },
        };
        let log = SharedLog::default();
        let mut recorder = Recorder::new(Box::new(log.clone()), &[], None);
        let outcome = engine
            .run_collaboration(&GenerationCache::new(), &mut recorder)
            .await
            .unwrap();
        let events = log.0.lock().unwrap().clone();
        (outcome, events)
    }

    /// Writes the question set to `dir/questions.json` and returns a spec for
    /// the file-backed run API.
    pub fn spec(&self, dir: &Path) -> RunSpec {
        let path = dir.join("questions.json");
        std::fs::write(&path, icf_core::dataset::to_document(&self.questions)).unwrap();
        RunSpec {
            dataset_path: path,
            participants: self.participants.clone(),
            summarizer: self.summarizer.clone(),
            loop_config: self.config,
            seed: self.seed,
            summarize_scope: SummarizeScope::MajorityOnly,
            templates_dir: None,
            dialects: Vec::new(),
        }
    }
}
