//! Multiple-choice question sets.
//!
//! A dataset file is a JSON document:
//!
//! ```json
//! {
//!   "source": "usmle-sample-2024",
//!   "questions": [
//!     {
//!       "id": "s1-q1",
//!       "step": 1,
//!       "stem": "A 23-year-old woman presents with ...",
//!       "choices": { "A": "...", "B": "...", "C": "..." },
//!       "answer": "B",
//!       "has_media": false
//!     }
//!   ]
//! }
//! ```
//!
//! `source` is optional (defaults to the empty string), `answer` is optional,
//! `has_media` defaults to `false`. A bare top-level array of question records
//! is accepted as well.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// A single choice letter, `A` through `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter(u8);

impl Letter {
    pub fn new(c: char) -> Option<Self> {
        c.is_ascii_uppercase().then_some(Letter(c as u8))
    }

    /// Letter at zero-based position `index` in the alphabet.
    pub fn from_index(index: usize) -> Option<Self> {
        (index < 26).then(|| Letter(b'A' + index as u8))
    }

    pub fn as_char(self) -> char {
        self.0 as char
    }

    pub fn index(self) -> usize {
        (self.0 - b'A') as usize
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl std::str::FromStr for Letter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Letter::new(c).ok_or_else(|| format!("`{s}` is not an uppercase letter")),
            _ => Err(format!("`{s}` is not a single letter")),
        }
    }
}

impl Serialize for Letter {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Letter {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// USMLE exam step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    One,
    Two,
    Three,
}

impl Step {
    pub const ALL: [Step; 3] = [Step::One, Step::Two, Step::Three];

    pub fn number(self) -> u8 {
        match self {
            Step::One => 1,
            Step::Two => 2,
            Step::Three => 3,
        }
    }

    pub fn from_number(n: i64) -> Option<Self> {
        match n {
            1 => Some(Step::One),
            2 => Some(Step::Two),
            3 => Some(Step::Three),
            _ => None,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Step {}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub step: Step,
    pub stem: String,
    /// Choices in letter order; letters are contiguous from `A`.
    pub choices: Vec<(Letter, String)>,
    pub answer_key: Option<Letter>,
    pub has_media: bool,
}

impl Question {
    pub fn letters(&self) -> impl Iterator<Item = Letter> + '_ {
        self.choices.iter().map(|(l, _)| *l)
    }

    pub fn first_letter(&self) -> Letter {
        self.choices[0].0
    }

    pub fn last_letter(&self) -> Letter {
        self.choices[self.choices.len() - 1].0
    }

    pub fn has_letter(&self, letter: Letter) -> bool {
        letter.index() < self.choices.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuestionSet {
    pub source: String,
    pub questions: Vec<Question>,
}

impl QuestionSet {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.questions.iter().map(|q| q.id.as_str())
    }

    /// True when every question carries an answer key.
    pub fn is_keyed(&self) -> bool {
        self.questions.iter().all(|q| q.answer_key.is_some())
    }

    pub fn steps(&self) -> Vec<Step> {
        Step::ALL
            .into_iter()
            .filter(|s| self.questions.iter().any(|q| q.step == *s))
            .collect()
    }
}

/// Keeps only questions without media, preserving order.
pub fn filter_text_only(qs: &QuestionSet) -> QuestionSet {
    QuestionSet {
        source: qs.source.clone(),
        questions: qs.questions.iter().filter(|q| !q.has_media).cloned().collect(),
    }
}

/// SHA-256 of the raw dataset bytes, lowercase hex.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One validation problem, tied to the offending record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Zero-based position of the record in the file.
    pub index: usize,
    pub question_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.question_id {
            Some(id) => write!(f, "question #{} ({id}): {}", self.index, self.message),
            None => write!(f, "question #{}: {}", self.index, self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("malformed dataset file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{} invalid question record(s)", .0.len())]
    Invalid(Vec<Diagnostic>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawFile {
    Document {
        #[serde(default)]
        source: String,
        questions: Vec<RawQuestion>,
    },
    List(Vec<RawQuestion>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuestion {
    id: Option<String>,
    step: Option<i64>,
    stem: Option<String>,
    #[serde(default)]
    choices: BTreeMap<String, String>,
    answer: Option<String>,
    #[serde(default)]
    has_media: bool,
}

/// Parses and validates a dataset document.
pub fn load_question_set(serialized: &str) -> Result<QuestionSet, DatasetError> {
    let (source, raw) = match serde_json::from_str::<RawFile>(serialized)? {
        RawFile::Document { source, questions } => (source, questions),
        RawFile::List(questions) => (String::new(), questions),
    };

    let mut diagnostics = Vec::new();
    let mut questions = Vec::with_capacity(raw.len());
    let mut seen = HashSet::new();

    for (index, rq) in raw.into_iter().enumerate() {
        let before = diagnostics.len();
        let mut problem = |id: &Option<String>, message: String| {
            diagnostics.push(Diagnostic {
                index,
                question_id: id.clone(),
                message,
            })
        };

        let id = rq.id.clone().filter(|s| !s.trim().is_empty());
        if id.is_none() {
            problem(&rq.id, "missing or empty id".into());
        } else if !seen.insert(id.clone().unwrap()) {
            problem(&id, format!("duplicate id \"{}\"", id.as_deref().unwrap()));
        }

        let step = match rq.step {
            None => {
                problem(&id, "missing step".into());
                None
            }
            Some(n) => {
                let step = Step::from_number(n);
                if step.is_none() {
                    problem(&id, format!("step must be 1, 2 or 3, got {n}"));
                }
                step
            }
        };

        let stem = rq.stem.unwrap_or_default();
        if stem.trim().is_empty() {
            problem(&id, "missing stem".into());
        }

        let mut choices = Vec::with_capacity(rq.choices.len());
        if rq.choices.len() < 2 || rq.choices.len() > 26 {
            problem(&id, format!("expected 2 to 26 choices, got {}", rq.choices.len()));
        }
        // BTreeMap iterates in key order, so contiguity is a positional check.
        for (position, (key, text)) in rq.choices.iter().enumerate() {
            match key.parse::<Letter>() {
                Ok(letter) if letter.index() == position => {
                    if text.trim().is_empty() {
                        problem(&id, format!("choice {letter} has empty text"));
                    }
                    choices.push((letter, text.clone()));
                }
                Ok(letter) => {
                    problem(
                        &id,
                        format!(
                            "choice letters must be contiguous from A; found {letter} at position {}",
                            position + 1
                        ),
                    );
                }
                Err(_) => problem(&id, format!("bad choice letter \"{key}\"")),
            }
        }

        let answer_key = match rq.answer.as_deref() {
            None => None,
            Some(s) => match s.parse::<Letter>() {
                Ok(l) if rq.choices.contains_key(s) => Some(l),
                _ => {
                    problem(&id, format!("answer \"{s}\" is not one of the choice letters"));
                    None
                }
            },
        };

        if diagnostics.len() == before {
            questions.push(Question {
                id: id.unwrap(),
                step: step.unwrap(),
                stem,
                choices,
                answer_key,
                has_media: rq.has_media,
            });
        }
    }

    if diagnostics.is_empty() {
        Ok(QuestionSet { source, questions })
    } else {
        Err(DatasetError::Invalid(diagnostics))
    }
}

#[derive(Serialize)]
struct OutQuestion<'a> {
    id: &'a str,
    step: u8,
    stem: &'a str,
    choices: BTreeMap<String, &'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer: Option<Letter>,
    has_media: bool,
}

#[derive(Serialize)]
struct OutFile<'a> {
    source: &'a str,
    questions: Vec<OutQuestion<'a>>,
}

/// Serializes a set in the dataset file format (pretty-printed JSON).
pub fn to_document(qs: &QuestionSet) -> String {
    let file = OutFile {
        source: &qs.source,
        questions: qs
            .questions
            .iter()
            .map(|q| OutQuestion {
                id: &q.id,
                step: q.step.number(),
                stem: &q.stem,
                choices: q.choices.iter().map(|(l, t)| (l.to_string(), t.as_str())).collect(),
                answer: q.answer_key,
                has_media: q.has_media,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("question set serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, step: u8, n_choices: usize, media: bool) -> String {
        let choices: Vec<String> = (0..n_choices)
            .map(|i| format!("\"{}\": \"option {}\"", Letter::from_index(i).unwrap(), i + 1))
            .collect();
        format!(
            r#"{{"id": "{id}", "step": {step}, "stem": "stem of {id}", "choices": {{{}}}, "answer": "A", "has_media": {media}}}"#,
            choices.join(", ")
        )
    }

    fn document(records: &[String]) -> String {
        format!(r#"{{"source": "fixture", "questions": [{}]}}"#, records.join(","))
    }

    #[test]
    fn loads_step_one_sized_set() {
        let records: Vec<String> = (0..87).map(|i| record(&format!("s1-q{i}"), 1, 5, false)).collect();
        let qs = load_question_set(&document(&records)).unwrap();
        assert_eq!(qs.len(), 87);
        assert_eq!(qs.source, "fixture");
        assert_eq!(qs.questions[3].choices.len(), 5);
        assert_eq!(qs.questions[3].last_letter(), Letter::new('E').unwrap());
    }

    #[test]
    fn empty_list_is_valid() {
        let qs = load_question_set(r#"{"questions": []}"#).unwrap();
        assert!(qs.is_empty());
        assert!(load_question_set("[]").unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let doc = document(&[record("s1-q7", 1, 4, false), record("s1-q7", 1, 4, false)]);
        let Err(DatasetError::Invalid(diags)) = load_question_set(&doc) else {
            panic!("expected validation failure");
        };
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].index, 1);
        assert!(diags[0].message.contains("s1-q7"), "{}", diags[0]);
    }

    #[test]
    fn rejects_gaps_and_bad_keys() {
        let doc = r#"[{"id": "x", "step": 2, "stem": "s", "choices": {"A": "a", "C": "c"}, "answer": "C"}]"#;
        let Err(DatasetError::Invalid(diags)) = load_question_set(doc) else {
            panic!()
        };
        assert!(diags.iter().any(|d| d.message.contains("contiguous")));

        let doc = r#"[{"id": "x", "step": 2, "stem": "s", "choices": {"A": "a", "B": "b"}, "answer": "D"}]"#;
        let Err(DatasetError::Invalid(diags)) = load_question_set(doc) else {
            panic!()
        };
        assert!(diags[0].message.contains("answer"));

        let doc = r#"[{"id": "x", "step": 4, "stem": " ", "choices": {"a": "a", "B": ""}}]"#;
        let Err(DatasetError::Invalid(diags)) = load_question_set(doc) else {
            panic!()
        };
        let all: Vec<String> = diags.iter().map(|d| d.message.clone()).collect();
        assert!(all.iter().any(|m| m.contains("step")), "{all:?}");
        assert!(all.iter().any(|m| m.contains("stem")), "{all:?}");
        assert!(all.iter().any(|m| m.contains("bad choice letter")), "{all:?}");
    }

    #[test]
    fn single_choice_rejected() {
        let doc = r#"[{"id": "x", "step": 1, "stem": "s", "choices": {"A": "a"}}]"#;
        assert!(matches!(load_question_set(doc), Err(DatasetError::Invalid(_))));
    }

    #[test]
    fn malformed_is_parse_error() {
        assert!(matches!(load_question_set("{not json"), Err(DatasetError::Parse(_))));
        assert!(matches!(
            load_question_set(r#"[{"id": "x", "unknown_field": 1}]"#),
            Err(DatasetError::Parse(_))
        ));
    }

    #[test]
    fn keyless_questions_load() {
        let doc = r#"[{"id": "x", "step": 3, "stem": "s", "choices": {"A": "a", "B": "b"}}]"#;
        let qs = load_question_set(doc).unwrap();
        assert_eq!(qs.questions[0].answer_key, None);
        assert!(!qs.is_keyed());
    }

    #[test]
    fn filter_examples() {
        let records: Vec<String> = (0..10)
            .map(|i| record(&format!("q{i}"), 1, 4, matches!(i, 2 | 5 | 9)))
            .collect();
        let qs = load_question_set(&document(&records)).unwrap();
        let kept = filter_text_only(&qs);
        let ids: Vec<&str> = kept.ids().collect();
        assert_eq!(ids, ["q0", "q1", "q3", "q4", "q6", "q7", "q8"]);

        let none: Vec<String> = (0..4).map(|i| record(&format!("q{i}"), 2, 4, false)).collect();
        let qs = load_question_set(&document(&none)).unwrap();
        assert_eq!(filter_text_only(&qs), qs);

        let all: Vec<String> = (0..4).map(|i| record(&format!("q{i}"), 2, 4, true)).collect();
        let qs = load_question_set(&document(&all)).unwrap();
        assert!(filter_text_only(&qs).is_empty());
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_counts_add_up(
            flags in proptest::collection::vec((any::<bool>(), 2usize..9, 1u8..4), 0..40)
        ) {
            let records: Vec<String> = flags
                .iter()
                .enumerate()
                .map(|(i, (m, n, s))| record(&format!("q{i}"), *s, *n, *m))
                .collect();
            let text = document(&records);
            let qs = load_question_set(&text).unwrap();
            prop_assert_eq!(&load_question_set(&text).unwrap(), &qs);
            let once = filter_text_only(&qs);
            prop_assert_eq!(&filter_text_only(&once), &once);
            let media = qs.questions.iter().filter(|q| q.has_media).count();
            prop_assert_eq!(once.len() + media, qs.len());
            prop_assert_eq!(&load_question_set(&to_document(&qs)).unwrap(), &qs);
        }
    }
}
