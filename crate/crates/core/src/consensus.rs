//! Unanimity across participants, consensus rate, and teammate support.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::QuestionSet;
use crate::sc::Prediction;

/// Latest predictions keyed by (question id, model id).
pub type PredictionTable = BTreeMap<(String, String), Prediction>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agreement {
    Consensus,
    Disagreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Support {
    /// At least one teammate proposed the same answer.
    #[serde(rename = "s_plus")]
    SPlus,
    /// No teammate proposed the same answer.
    #[serde(rename = "s_minus")]
    SMinus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPartition {
    pub round: u32,
    /// Question ids in dataset order.
    pub consensus_ids: Vec<String>,
    /// Question ids in dataset order.
    pub disagreed_ids: Vec<String>,
    /// Percentage in [0, 100].
    pub consensus_rate: f64,
}

impl RoundPartition {
    pub fn total(&self) -> usize {
        self.consensus_ids.len() + self.disagreed_ids.len()
    }

    /// Consensus rate recomputed from the id sets.
    pub fn rate_from_sets(&self) -> f64 {
        consensus_rate(self.consensus_ids.len(), self.total())
    }
}

/// 100 · agreed / total.
pub fn consensus_rate(agreed: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    100.0 * agreed as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConsensusError {
    #[error("consensus needs at least 2 participants, got {0}")]
    TooFewParticipants(usize),
    #[error("predictions mix questions/rounds: {0}")]
    Mismatched(String),
    #[error("missing predictions for {}", format_pairs(.0))]
    MissingPredictions(Vec<(String, String)>),
    #[error("question set is empty")]
    EmptyQuestionSet,
    #[error("model `{0}` abstained; support is undefined")]
    Abstained(String),
    #[error("model `{0}` has no prediction for this question")]
    UnknownModel(String),
}

fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(q, m)| format!("({q}, {m})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Consensus iff every participant's majority is the same valid letter.
pub fn classify_question(preds: &[&Prediction]) -> Result<Agreement, ConsensusError> {
    if preds.len() < 2 {
        return Err(ConsensusError::TooFewParticipants(preds.len()));
    }
    let first = preds[0];
    if let Some(odd) = preds.iter().find(|p| p.question_id != first.question_id) {
        return Err(ConsensusError::Mismatched(format!(
            "{} vs {}",
            first.question_id, odd.question_id
        )));
    }
    let agreed = first.majority.is_some() && preds.iter().all(|p| p.majority == first.majority);
    Ok(if agreed {
        Agreement::Consensus
    } else {
        Agreement::Disagreement
    })
}

/// Splits `qs` by agreement among `participants`, reading predictions from
/// `table`.
pub fn partition(
    qs: &QuestionSet,
    participants: &[String],
    table: &PredictionTable,
    round: u32,
) -> Result<RoundPartition, ConsensusError> {
    if participants.len() < 2 {
        return Err(ConsensusError::TooFewParticipants(participants.len()));
    }
    if qs.is_empty() {
        return Err(ConsensusError::EmptyQuestionSet);
    }
    let mut missing = Vec::new();
    let mut consensus_ids = Vec::new();
    let mut disagreed_ids = Vec::new();
    for q in &qs.questions {
        let mut preds = Vec::with_capacity(participants.len());
        for m in participants {
            match table.get(&(q.id.clone(), m.clone())) {
                Some(p) => preds.push(p),
                None => missing.push((q.id.clone(), m.clone())),
            }
        }
        if preds.len() != participants.len() {
            continue;
        }
        match classify_question(&preds)? {
            Agreement::Consensus => consensus_ids.push(q.id.clone()),
            Agreement::Disagreement => disagreed_ids.push(q.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(ConsensusError::MissingPredictions(missing));
    }
    let consensus_rate = consensus_rate(consensus_ids.len(), qs.len());
    Ok(RoundPartition {
        round,
        consensus_ids,
        disagreed_ids,
        consensus_rate,
    })
}

/// Whether some teammate of `model_id` shares its majority answer.
pub fn support_level(model_id: &str, preds: &[&Prediction]) -> Result<Support, ConsensusError> {
    let own = preds
        .iter()
        .find(|p| p.model_id == model_id)
        .ok_or_else(|| ConsensusError::UnknownModel(model_id.into()))?;
    let Some(answer) = own.majority else {
        return Err(ConsensusError::Abstained(model_id.into()));
    };
    let supported = preds
        .iter()
        .any(|p| p.model_id != model_id && p.majority == Some(answer));
    Ok(if supported { Support::SPlus } else { Support::SMinus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Letter, Question, Step};
    use proptest::prelude::*;

    fn pred(q: &str, model: &str, answer: Option<char>) -> Prediction {
        Prediction {
            question_id: q.into(),
            model_id: model.into(),
            round: 0,
            majority: answer.map(|c| Letter::new(c).unwrap()),
            vote_count: answer.map_or(0, |_| 1),
            n: 1,
            samples: vec![],
            summary: String::new(),
        }
    }

    fn trio(answers: [Option<char>; 3]) -> Vec<Prediction> {
        ["m1", "m2", "m3"]
            .iter()
            .zip(answers)
            .map(|(m, a)| pred("q", m, a))
            .collect()
    }

    fn classify(answers: [Option<char>; 3]) -> Agreement {
        let preds = trio(answers);
        classify_question(&preds.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify([Some('A'), Some('A'), Some('A')]), Agreement::Consensus);
        assert_eq!(classify([Some('A'), Some('A'), Some('B')]), Agreement::Disagreement);
        assert_eq!(classify([Some('A'), None, Some('A')]), Agreement::Disagreement);
        assert_eq!(classify([None, None, None]), Agreement::Disagreement);
    }

    #[test]
    fn classify_errors() {
        let one = [pred("q", "m1", Some('A'))];
        assert_eq!(
            classify_question(&one.iter().collect::<Vec<_>>()),
            Err(ConsensusError::TooFewParticipants(1))
        );
        let mixed = [pred("q1", "m1", Some('A')), pred("q2", "m2", Some('A'))];
        assert!(matches!(
            classify_question(&mixed.iter().collect::<Vec<_>>()),
            Err(ConsensusError::Mismatched(_))
        ));
    }

    fn question_set(n: usize) -> QuestionSet {
        QuestionSet {
            source: String::new(),
            questions: (0..n)
                .map(|i| Question {
                    id: format!("q{i}"),
                    step: Step::One,
                    stem: "s".into(),
                    choices: vec![
                        (Letter::new('A').unwrap(), "a".into()),
                        (Letter::new('B').unwrap(), "b".into()),
                    ],
                    answer_key: None,
                    has_media: false,
                })
                .collect(),
        }
    }

    fn table_with(qs: &QuestionSet, agree: usize) -> PredictionTable {
        let mut table = PredictionTable::new();
        for (i, q) in qs.questions.iter().enumerate() {
            for (j, m) in ["m1", "m2", "m3"].iter().enumerate() {
                let answer = if i < agree || j < 2 { 'A' } else { 'B' };
                table.insert((q.id.clone(), m.to_string()), pred(&q.id, m, Some(answer)));
            }
        }
        table
    }

    fn models() -> Vec<String> {
        vec!["m1".into(), "m2".into(), "m3".into()]
    }

    #[test]
    fn partition_rates() {
        let qs = question_set(87);
        let p = partition(&qs, &models(), &table_with(&qs, 49), 0).unwrap();
        assert_eq!(p.consensus_ids.len(), 49);
        assert_eq!(format!("{:.2}", p.consensus_rate), "56.32");

        let qs = question_set(100);
        let p = partition(&qs, &models(), &table_with(&qs, 41), 0).unwrap();
        assert_eq!(format!("{:.2}", p.consensus_rate), "41.00");

        let p = partition(&qs, &models(), &table_with(&qs, 0), 0).unwrap();
        assert_eq!(p.consensus_rate, 0.0);
        assert_eq!(p.disagreed_ids.len(), 100);

        let p = partition(&qs, &models(), &table_with(&qs, 100), 0).unwrap();
        assert_eq!(p.consensus_rate, 100.0);
        assert!(p.disagreed_ids.is_empty());
    }

    #[test]
    fn partition_lists_missing_pairs() {
        let qs = question_set(3);
        let mut table = table_with(&qs, 3);
        table.remove(&("q1".to_string(), "m2".to_string()));
        table.remove(&("q2".to_string(), "m3".to_string()));
        assert_eq!(
            partition(&qs, &models(), &table, 0),
            Err(ConsensusError::MissingPredictions(vec![
                ("q1".into(), "m2".into()),
                ("q2".into(), "m3".into())
            ]))
        );
    }

    #[test]
    fn support_examples() {
        let support = |answers: [Option<char>; 3], model: &str| {
            let preds = trio(answers);
            support_level(model, &preds.iter().collect::<Vec<_>>())
        };
        assert_eq!(support([Some('A'), Some('A'), Some('B')], "m1"), Ok(Support::SPlus));
        assert_eq!(support([Some('A'), Some('B'), Some('C')], "m1"), Ok(Support::SMinus));
        assert_eq!(support([Some('A'), Some('B'), Some('B')], "m1"), Ok(Support::SMinus));
        assert_eq!(support([Some('A'), Some('B'), Some('B')], "m2"), Ok(Support::SPlus));
        assert_eq!(support([Some('A'), Some('B'), Some('B')], "m3"), Ok(Support::SPlus));
        assert_eq!(
            support([None, Some('B'), Some('B')], "m1"),
            Err(ConsensusError::Abstained("m1".into()))
        );
    }

    proptest! {
        #[test]
        fn classification_ignores_participant_order(
            answers in proptest::collection::vec(proptest::option::weighted(0.9, 0u8..3), 2..6),
            rotate in 0usize..6,
        ) {
            let preds: Vec<Prediction> = answers
                .iter()
                .enumerate()
                .map(|(i, a)| pred("q", &format!("m{i}"), a.map(|x| (b'A' + x) as char)))
                .collect();
            let mut refs: Vec<&Prediction> = preds.iter().collect();
            let base = classify_question(&refs).unwrap();
            let k = rotate % refs.len();
            refs.rotate_left(k);
            prop_assert_eq!(classify_question(&refs).unwrap(), base);
            refs.reverse();
            prop_assert_eq!(classify_question(&refs).unwrap(), base);

            // with >= 3 all-valid participants in disagreement, someone is
            // unsupported or at least two letters exist
            if base == Agreement::Disagreement && preds.len() >= 3 && preds.iter().all(|p| p.majority.is_some()) {
                let distinct: std::collections::BTreeSet<_> = preds.iter().map(|p| p.majority).collect();
                let any_minus = preds.iter().any(|p| support_level(&p.model_id, &refs) == Ok(Support::SMinus));
                prop_assert!(any_minus || distinct.len() >= 2);
            }
        }
    }
}
