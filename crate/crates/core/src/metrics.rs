//! Accuracy, confidence (insistence under teammate support), consistency
//! (normalized majority-vote count), and Spearman rank correlation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::collab::RunOutcome;
use crate::consensus::{support_level, Support};
use crate::dataset::{QuestionSet, Step};
use crate::sc::Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStage {
    /// Round-0 self-consistency answers.
    Initial,
    /// Latest answer per question after the collaboration loop.
    PostCollaboration,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("question {0} has no answer key")]
    MissingKey(String),
    #[error("no {stage:?} prediction for ({question}, {model})")]
    MissingPrediction {
        stage: EvalStage,
        question: String,
        model: String,
    },
    #[error("no collaboration round has run")]
    NoCollaboration,
    #[error("{0}: both support classes are empty")]
    EmptySupportClasses(String),
    #[error("{0}: no questions left after filtering")]
    EmptySubset(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("input contains NaN")]
    NotANumber,
    #[error("constant input; rank correlation is undefined")]
    Degenerate,
}

/// Predictions of `model` at `stage`, in dataset order.
pub fn stage_predictions<'a>(
    outcome: &'a RunOutcome,
    qs: &QuestionSet,
    model: &str,
    stage: EvalStage,
) -> Result<Vec<&'a Prediction>, MetricsError> {
    qs.questions
        .iter()
        .map(|q| {
            let found = match stage {
                EvalStage::Initial => outcome.prediction(0, &q.id, model),
                EvalStage::PostCollaboration => outcome.final_answers.get(&(q.id.clone(), model.to_string())),
            };
            found.ok_or_else(|| MetricsError::MissingPrediction {
                stage,
                question: q.id.clone(),
                model: model.into(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    /// `None` for the pooled row over all steps.
    pub step: Option<u8>,
    pub correct: usize,
    pub total: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub model_id: String,
    pub stage: EvalStage,
    /// One cell per step present in the set, then the pooled cell.
    pub cells: Vec<AccuracyCell>,
}

impl AccuracyReport {
    pub fn overall(&self) -> &AccuracyCell {
        self.cells.last().expect("pooled cell is always present")
    }

    pub fn step(&self, step: Step) -> Option<&AccuracyCell> {
        self.cells.iter().find(|c| c.step == Some(step.number()))
    }
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Accuracy per participant; abstentions count as wrong.
pub fn accuracy(outcome: &RunOutcome, qs: &QuestionSet, stage: EvalStage) -> Result<Vec<AccuracyReport>, MetricsError> {
    if let Some(q) = qs.questions.iter().find(|q| q.answer_key.is_none()) {
        return Err(MetricsError::MissingKey(q.id.clone()));
    }
    let mut reports = Vec::new();
    for model in &outcome.participants {
        let preds = stage_predictions(outcome, qs, model, stage)?;
        let hits: Vec<(Step, bool)> = qs
            .questions
            .iter()
            .zip(&preds)
            .map(|(q, p)| (q.step, p.majority.is_some() && p.majority == q.answer_key))
            .collect();
        let cell = |step: Option<Step>| {
            let subset: Vec<bool> = hits
                .iter()
                .filter(|(s, _)| step.is_none_or(|want| *s == want))
                .map(|(_, hit)| *hit)
                .collect();
            let correct = subset.iter().filter(|h| **h).count();
            AccuracyCell {
                step: step.map(Step::number),
                correct,
                total: subset.len(),
                percent: percent(correct, subset.len()),
            }
        };
        let mut cells: Vec<AccuracyCell> = qs.steps().into_iter().map(|s| cell(Some(s))).collect();
        cells.push(cell(None));
        reports.push(AccuracyReport {
            model_id: model.clone(),
            stage,
            cells,
        });
    }
    Ok(reports)
}

/// Initially disagreed questions on which `model` ended with its round-0
/// answer.
pub fn insist_set(outcome: &RunOutcome, model: &str) -> Result<BTreeSet<String>, MetricsError> {
    if outcome.collaboration_rounds() == 0 {
        return Err(MetricsError::NoCollaboration);
    }
    let initial = outcome
        .initial_partition()
        .expect("a collaboration round implies round 0");
    Ok(initial
        .disagreed_ids
        .iter()
        .filter(|qid| {
            let first = outcome.prediction(0, qid, model).and_then(|p| p.majority);
            let last = outcome
                .final_answers
                .get(&(qid.to_string(), model.to_string()))
                .and_then(|p| p.majority);
            first.is_some() && first == last
        })
        .cloned()
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub model_id: String,
    /// |S⁺ ∩ insist| / |S⁺|, undefined when S⁺ is empty.
    pub p_insist_with_support: Option<f64>,
    /// |S⁻ ∩ insist| / |S⁻|, undefined when S⁻ is empty.
    pub p_insist_without_support: Option<f64>,
    /// Mean of the defined components.
    pub confidence: f64,
    /// (|S⁺|, |S⁻|)
    pub support_counts: (usize, usize),
    /// (|S⁺ ∩ insist|, |S⁻ ∩ insist|)
    pub insist_counts: (usize, usize),
}

impl ConfidenceReport {
    /// True when only one support class was available.
    pub fn is_partial(&self) -> bool {
        self.p_insist_with_support.is_none() || self.p_insist_without_support.is_none()
    }
}

/// Insist rates with and without teammate support, from round-0 support and
/// round-0 versus final answers. Questions where the model abstained in round
/// 0 are left out.
pub fn confidence(outcome: &RunOutcome, model: &str) -> Result<ConfidenceReport, MetricsError> {
    let insist = insist_set(outcome, model)?;
    let initial = outcome.initial_partition().expect("checked by insist_set");
    let mut support_counts = (0, 0);
    let mut insist_counts = (0, 0);
    for qid in &initial.disagreed_ids {
        let preds: Vec<&Prediction> = outcome
            .participants
            .iter()
            .filter_map(|m| outcome.prediction(0, qid, m))
            .collect();
        let Ok(support) = support_level(model, &preds) else {
            continue;
        };
        let kept = insist.contains(qid) as usize;
        match support {
            Support::SPlus => {
                support_counts.0 += 1;
                insist_counts.0 += kept;
            }
            Support::SMinus => {
                support_counts.1 += 1;
                insist_counts.1 += kept;
            }
        }
    }
    let ratio = |k: usize, n: usize| (n > 0).then(|| k as f64 / n as f64);
    let with = ratio(insist_counts.0, support_counts.0);
    let without = ratio(insist_counts.1, support_counts.1);
    let defined: Vec<f64> = [with, without].into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(MetricsError::EmptySupportClasses(model.into()));
    }
    Ok(ConfidenceReport {
        model_id: model.into(),
        p_insist_with_support: with,
        p_insist_without_support: without,
        confidence: defined.iter().sum::<f64>() / defined.len() as f64,
        support_counts,
        insist_counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetFilter {
    All,
    CorrectOnly,
    IncorrectOnly,
}

/// `All`: mean of vote_count / n. `CorrectOnly` / `IncorrectOnly`: mean raw
/// vote_count over predictions whose majority does / does not match the key
/// (abstentions are incorrect).
pub fn consistency(preds: &[&Prediction], filter: SubsetFilter, qs: &QuestionSet) -> Result<f64, MetricsError> {
    let label = preds.first().map(|p| p.model_id.clone()).unwrap_or_default();
    let selected: Vec<&Prediction> = match filter {
        SubsetFilter::All => preds.to_vec(),
        SubsetFilter::CorrectOnly | SubsetFilter::IncorrectOnly => {
            let mut out = Vec::new();
            for p in preds {
                let key = qs
                    .get(&p.question_id)
                    .and_then(|q| q.answer_key)
                    .ok_or_else(|| MetricsError::MissingKey(p.question_id.clone()))?;
                let correct = p.majority == Some(key);
                if correct == (filter == SubsetFilter::CorrectOnly) {
                    out.push(*p);
                }
            }
            out
        }
    };
    if selected.is_empty() {
        return Err(MetricsError::EmptySubset(label));
    }
    let count = selected.len() as f64;
    Ok(match filter {
        SubsetFilter::All => selected.iter().map(|p| p.consistency()).sum::<f64>() / count,
        _ => selected.iter().map(|p| p.vote_count as f64).sum::<f64>() / count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub model_id: String,
    pub stage: EvalStage,
    /// Mean vote count on correctly answered questions; `None` if there are none.
    pub avg_count_correct: Option<f64>,
    /// Mean vote count on incorrectly answered questions; `None` if there are none.
    pub avg_count_incorrect: Option<f64>,
    /// correct − incorrect, when both are defined.
    pub difference: Option<f64>,
    /// Mean of vote_count / n over all questions.
    pub overall: f64,
}

pub fn consistency_report(
    outcome: &RunOutcome,
    qs: &QuestionSet,
    model: &str,
    stage: EvalStage,
) -> Result<ConsistencyReport, MetricsError> {
    let preds = stage_predictions(outcome, qs, model, stage)?;
    let overall = consistency(&preds, SubsetFilter::All, qs)?;
    let optional = |filter| match consistency(&preds, filter, qs) {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::EmptySubset(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let correct = optional(SubsetFilter::CorrectOnly)?;
    let incorrect = optional(SubsetFilter::IncorrectOnly)?;
    Ok(ConsistencyReport {
        model_id: model.into(),
        stage,
        avg_count_correct: correct,
        avg_count_incorrect: incorrect,
        difference: correct.zip(incorrect).map(|(c, i)| c - i),
        overall,
    })
}

/// Average (1-based) ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman_rank(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooFew(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(MetricsError::NotANumber);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (xs.len() + 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mean, b - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::Degenerate);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::RoundPartition;
    use crate::dataset::{Letter, Question};

    fn l(c: char) -> Letter {
        Letter::new(c).unwrap()
    }

    fn pred(q: &str, m: &str, round: u32, answer: Option<char>, votes: u32) -> Prediction {
        Prediction {
            question_id: q.into(),
            model_id: m.into(),
            round,
            majority: answer.map(l),
            vote_count: votes,
            n: 10,
            samples: vec![],
            summary: String::new(),
        }
    }

    fn keyed(ids: &[&str], key: char) -> QuestionSet {
        QuestionSet {
            source: String::new(),
            questions: ids
                .iter()
                .map(|id| Question {
                    id: id.to_string(),
                    step: Step::One,
                    stem: "s".into(),
                    choices: vec![(l('A'), "a".into()), (l('B'), "b".into()), (l('C'), "c".into())],
                    answer_key: Some(l(key)),
                    has_media: false,
                })
                .collect(),
        }
    }

    #[test]
    fn accuracy_abstain_counts_wrong() {
        let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let qs = keyed(&id_refs, 'A');
        let mut outcome = RunOutcome::new(vec!["m".into()]);
        for (i, id) in ids.iter().enumerate() {
            outcome.insert(pred(id, "m", 0, if i == 3 { None } else { Some('A') }, 5));
        }
        let reports = accuracy(&outcome, &qs, EvalStage::Initial).unwrap();
        assert_eq!(reports[0].overall().correct, 9);
        assert_eq!(format!("{:.2}", reports[0].overall().percent), "90.00");
        assert_eq!(reports[0].cells.len(), 2);

        let mut keyless = qs.clone();
        keyless.questions[4].answer_key = None;
        assert_eq!(
            accuracy(&outcome, &keyless, EvalStage::Initial),
            Err(MetricsError::MissingKey("q4".into()))
        );
    }

    #[test]
    fn consistency_examples() {
        let qs = keyed(&["a", "b"], 'A');
        let p1 = pred("a", "m", 0, Some('A'), 6);
        let p2 = pred("b", "m", 0, Some('B'), 4);
        let preds = [&p1, &p2];
        assert!((consistency(&preds, SubsetFilter::All, &qs).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(consistency(&preds, SubsetFilter::CorrectOnly, &qs).unwrap(), 6.0);
        assert_eq!(consistency(&preds, SubsetFilter::IncorrectOnly, &qs).unwrap(), 4.0);
        let only = [&p1];
        assert_eq!(
            consistency(&only, SubsetFilter::IncorrectOnly, &qs),
            Err(MetricsError::EmptySubset("m".into()))
        );
        let full = pred("a", "m", 0, Some('A'), 10);
        assert_eq!(consistency(&[&full], SubsetFilter::All, &qs).unwrap(), 1.0);
    }

    fn confidence_fixture(final_answers: [char; 3]) -> RunOutcome {
        // q1: m1=A m2=A m3=B (m1 supported); q2: m1=A m2=B m3=C (m1 alone);
        // q3: consensus.
        let mut o = RunOutcome::new(vec!["m1".into(), "m2".into(), "m3".into()]);
        for (q, answers) in [
            ("q1", ['A', 'A', 'B']),
            ("q2", ['A', 'B', 'C']),
            ("q3", ['C', 'C', 'C']),
        ] {
            for (m, a) in ["m1", "m2", "m3"].iter().zip(answers) {
                o.insert(pred(q, m, 0, Some(a), 7));
            }
        }
        o.partitions.push(RoundPartition {
            round: 0,
            consensus_ids: vec!["q3".into()],
            disagreed_ids: vec!["q1".into(), "q2".into()],
            consensus_rate: 100.0 / 3.0,
        });
        for (q, a) in ["q1", "q2"].iter().zip(final_answers) {
            for m in ["m1", "m2", "m3"] {
                o.insert(pred(q, m, 1, Some(if m == "m1" { a } else { 'A' }), 7));
            }
        }
        o.partitions.push(RoundPartition {
            round: 1,
            consensus_ids: vec!["q3".into()],
            disagreed_ids: vec![],
            consensus_rate: 100.0,
        });
        o
    }

    #[test]
    fn insist_and_confidence() {
        let o = confidence_fixture(['A', 'A', 'A']);
        assert_eq!(
            insist_set(&o, "m1").unwrap(),
            ["q1".to_string(), "q2".to_string()].into()
        );
        let c = confidence(&o, "m1").unwrap();
        assert_eq!(c.support_counts, (1, 1));
        assert_eq!(c.confidence, 1.0);

        let o = confidence_fixture(['A', 'B', 'A']);
        // m1 keeps A on q1 (supported), switches on q2 (alone)
        assert_eq!(insist_set(&o, "m1").unwrap(), ["q1".to_string()].into());
        let c = confidence(&o, "m1").unwrap();
        assert_eq!(c.p_insist_with_support, Some(1.0));
        assert_eq!(c.p_insist_without_support, Some(0.0));
        assert_eq!(c.confidence, 0.5);

        // m3 is unsupported on both; it switched to A on both
        let c = confidence(&o, "m3").unwrap();
        assert_eq!(c.support_counts, (0, 2));
        assert_eq!(c.p_insist_with_support, None);
        assert_eq!(c.confidence, 0.0);
        assert!(c.is_partial());
    }

    #[test]
    fn insist_needs_collaboration() {
        let mut o = confidence_fixture(['A', 'A', 'A']);
        o.partitions.truncate(1);
        assert_eq!(insist_set(&o, "m1"), Err(MetricsError::NoCollaboration));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rank(&[1.0, 2.0, 3.0], &[4.0, 5.0, 9.0]).unwrap(), 1.0);
        assert_eq!(spearman_rank(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman_rank(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(spearman_rank(&[1.0], &[1.0]), Err(MetricsError::TooFew(1)));
        assert_eq!(
            spearman_rank(&[1.0, 2.0], &[1.0]),
            Err(MetricsError::LengthMismatch(2, 1))
        );
        assert_eq!(spearman_rank(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::Degenerate));
        assert_eq!(
            spearman_rank(&[f64::NAN, 1.0], &[1.0, 2.0]),
            Err(MetricsError::NotANumber)
        );
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }
}
