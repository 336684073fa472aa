//! Files for the offline demo: a synthetic keyed question set, three scripted
//! agents tuned to disagree on about half the questions, a scripted
//! summarizer, and a config tying them together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use icf_core::collab::LoopConfig;
use icf_core::dataset::{self, Letter, Question, QuestionSet, Step};
use icf_core::gateway::{BackendSpec, Behavior, BehaviorSource, BehaviorTable};
use icf_core::sc::SummarizeScope;

use crate::config::{ProfileConfig, RunConfigFile};

const QUESTIONS_PER_STEP: usize = 10;
const AGENTS: [&str; 3] = ["agent-1", "agent-2", "agent-3"];
const SWAY: [f64; 3] = [0.7, 0.5, 0.35];
const TOPICS: [&str; 5] = [
    "a patient with progressive exertional dyspnea",
    "an infant with failure to thrive",
    "a traveler returning with intermittent fever",
    "an older adult with new-onset confusion",
    "a runner with recurrent shin pain",
];
const OPTIONS: [&str; 5] = [
    "Order the confirmatory laboratory study",
    "Start empiric therapy",
    "Obtain cross-sectional imaging",
    "Refer for a specialist procedure",
    "Observe and reassess",
];

fn letter(i: usize) -> Letter {
    Letter::from_index(i).expect("demo letters are in range")
}

pub fn question_set() -> QuestionSet {
    let mut questions = Vec::new();
    for step in Step::ALL {
        for j in 0..QUESTIONS_PER_STEP {
            let i = questions.len();
            questions.push(Question {
                id: format!("demo-s{}-{:02}", step.number(), j + 1),
                step,
                stem: format!(
                    "Case {}: {} is evaluated. Which is the most appropriate next step in management?",
                    i + 1,
                    TOPICS[i % TOPICS.len()]
                ),
                choices: OPTIONS
                    .iter()
                    .enumerate()
                    .map(|(k, t)| (letter(k), t.to_string()))
                    .collect(),
                answer_key: Some(letter((i * 3) % OPTIONS.len())),
                has_media: false,
            });
        }
    }
    QuestionSet {
        source: "synthetic demo".into(),
        questions,
    }
}

fn weights(pairs: &[(String, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().cloned().collect()
}

/// Even-numbered questions: everyone leans to the key. Odd-numbered: one
/// agent (rotating) leans elsewhere; on every fifth of those the lone agent
/// is the one that is right.
pub fn behavior_tables(qs: &QuestionSet) -> Vec<BehaviorTable> {
    let mut tables: Vec<BehaviorTable> = (0..AGENTS.len())
        .map(|a| BehaviorTable {
            default: Behavior {
                sway: SWAY[a],
                ..Behavior::default()
            },
            reasoning_template: format!(
                "weighing the history and exam, option {{letter}} fits best (agent {} view, sample {{sample}}). \
                 The other options leave key findings unexplained.",
                a + 1
            ),
            ..BehaviorTable::default()
        })
        .collect();
    for (i, q) in qs.questions.iter().enumerate() {
        let key = q.answer_key.expect("demo questions are keyed").to_string();
        let wrong = letter((i * 3 + 1) % OPTIONS.len()).to_string();
        let other = letter((i * 3 + 2) % OPTIONS.len()).to_string();
        let lean = |target: &str, stray: &str| {
            weights(&[
                (target.to_string(), 0.8),
                (stray.to_string(), 0.15),
                ("invalid".into(), 0.05),
            ])
        };
        for (a, table) in tables.iter_mut().enumerate() {
            let distribution = if i % 2 == 0 {
                lean(&key, &other)
            } else {
                let lone = (i / 2) % AGENTS.len();
                let lone_is_right = (i / 2) % 5 == 4;
                match (a == lone, lone_is_right) {
                    (true, false) => lean(&wrong, &key),
                    (true, true) => lean(&key, &other),
                    (false, false) => lean(&key, &other),
                    (false, true) => lean(&wrong, &key),
                }
            };
            table.questions.insert(
                q.id.clone(),
                Behavior {
                    distribution,
                    sway: SWAY[a],
                    ..Behavior::default()
                },
            );
        }
    }
    tables
}

fn scripted(model_id: &str, dialect: &str, seed: u64, behavior: &str) -> ProfileConfig {
    ProfileConfig {
        model_id: model_id.into(),
        dialect: dialect.into(),
        temperature: 1.0,
        max_new_tokens: 512,
        backend: BackendSpec::Scripted {
            seed,
            behavior: BehaviorSource::Path(PathBuf::from(behavior)),
        },
    }
}

pub fn config(seed: u64) -> RunConfigFile {
    let dialects = ["role_tagged", "instruction_bracketed", "instruction_bracketed"];
    RunConfigFile {
        dataset: "questions.json".into(),
        seed,
        parallelism: 4,
        out: "runs".into(),
        summarize_scope: SummarizeScope::MajorityOnly,
        templates_dir: None,
        loop_config: LoopConfig {
            threshold: 80.0,
            max_rounds: 5,
            n: 10,
        },
        participants: AGENTS
            .iter()
            .zip(dialects)
            .enumerate()
            .map(|(i, (id, d))| scripted(id, d, i as u64 + 1, &format!("agents/{id}.json")))
            .collect(),
        summarizer: scripted("summarizer", "instruction_bracketed", 99, "agents/summarizer.json"),
        dialects: Vec::new(),
    }
}

fn write(path: &Path, text: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)
}

/// Writes dataset, behavior tables and `config.toml` into `dir`; returns the
/// config path.
pub fn write_files(dir: &Path, seed: u64) -> std::io::Result<PathBuf> {
    let qs = question_set();
    write(&dir.join("questions.json"), &dataset::to_document(&qs))?;
    for (id, table) in AGENTS.iter().zip(behavior_tables(&qs)) {
        let text = serde_json::to_string_pretty(&table).expect("behavior serializes");
        write(&dir.join(format!("agents/{id}.json")), &(text + "\n"))?;
    }
    let summarizer = serde_json::to_string_pretty(&BehaviorTable::default()).expect("behavior serializes");
    write(&dir.join("agents/summarizer.json"), &(summarizer + "\n"))?;
    let path = dir.join("config.toml");
    write(&path, &toml::to_string(&config(seed)).expect("config serializes"))?;
    Ok(path)
}
