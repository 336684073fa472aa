//! Table-shaped summaries of a run: consensus convergence, accuracy,
//! confidence and consistency, written as CSV files plus `summary.txt`.
//!
//! Everything here is derived from the question set and the replayed outcome,
//! so the output is a pure function of the manifest and the event log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::collab::{RunOutcome, Termination};
use crate::consensus::RoundPartition;
use crate::dataset::{QuestionSet, Step};
use crate::metrics::{self, AccuracyReport, ConfidenceReport, ConsistencyReport, EvalStage, MetricsError};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("the run has no completed round; nothing to report")]
    EmptyRun,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusRow {
    /// `"Step 1"`.. or `"Average"` for the pooled row.
    pub label: String,
    pub questions: usize,
    pub initial_agreed: usize,
    pub initial_rate: f64,
    /// `None` when no collaboration round has completed.
    pub final_agreed: Option<usize>,
    pub final_rate: Option<f64>,
}

impl ConsensusRow {
    pub fn delta(&self) -> Option<f64> {
        self.final_rate.map(|f| f - self.initial_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub participants: Vec<String>,
    pub consensus: Vec<ConsensusRow>,
    pub collaboration_rounds: u32,
    pub termination: Option<Termination>,
    /// Initial accuracy, and post-collaboration accuracy when rounds ran.
    pub accuracy: Option<(Vec<AccuracyReport>, Option<Vec<AccuracyReport>>)>,
    /// One entry per participant; `None` where both support classes are empty.
    pub confidence: Option<Vec<(String, Option<ConfidenceReport>)>>,
    pub consistency: Vec<ConsistencyReport>,
    pub notices: Vec<String>,
}

fn count_in(ids: &[String], qs: &QuestionSet, step: Option<Step>) -> usize {
    ids.iter()
        .filter(|id| step.is_none_or(|s| qs.get(id).is_some_and(|q| q.step == s)))
        .count()
}

/// Per-step consensus rates at round 0 and at the last partition, plus a row
/// pooled over all questions.
pub fn consensus_table(qs: &QuestionSet, initial: &RoundPartition, last: Option<&RoundPartition>) -> Vec<ConsensusRow> {
    let row = |label: String, step: Option<Step>| {
        let questions = qs.questions.iter().filter(|q| step.is_none_or(|s| q.step == s)).count();
        let initial_agreed = count_in(&initial.consensus_ids, qs, step);
        let final_agreed = last.map(|p| count_in(&p.consensus_ids, qs, step));
        ConsensusRow {
            label,
            questions,
            initial_agreed,
            initial_rate: crate::consensus::consensus_rate(initial_agreed, questions),
            final_agreed,
            final_rate: final_agreed.map(|a| crate::consensus::consensus_rate(a, questions)),
        }
    };
    let mut rows: Vec<ConsensusRow> = qs
        .steps()
        .into_iter()
        .map(|s| row(format!("Step {}", s.number()), Some(s)))
        .collect();
    rows.push(row("Average".into(), None));
    rows
}

/// Drops predictions from a round whose partition was never recorded, so a
/// run interrupted mid-round reports the last completed round.
fn completed_prefix(outcome: &RunOutcome) -> RunOutcome {
    let last_round = outcome.final_partition().map_or(0, |p| p.round);
    let mut trimmed = RunOutcome::new(outcome.participants.clone());
    for p in outcome.predictions.values().filter(|p| p.round <= last_round) {
        trimmed.insert(p.clone());
    }
    trimmed.partitions = outcome.partitions.clone();
    trimmed.termination = outcome.termination;
    trimmed
}

pub fn compute_metrics(outcome: &RunOutcome, qs: &QuestionSet) -> Result<MetricsReport, ReportError> {
    let initial = outcome.initial_partition().ok_or(ReportError::EmptyRun)?;
    let outcome = completed_prefix(outcome);
    let rounds = outcome.collaboration_rounds();
    let last = (rounds > 0).then(|| outcome.final_partition()).flatten();
    let consensus = consensus_table(qs, initial, last);

    let mut notices = Vec::new();
    if outcome.termination.is_none() {
        notices.push(format!(
            "Run incomplete; figures cover {} completed collaboration round(s).",
            rounds
        ));
    }
    let stages: &[EvalStage] = if rounds > 0 {
        &[EvalStage::Initial, EvalStage::PostCollaboration]
    } else {
        &[EvalStage::Initial]
    };

    let mut report = MetricsReport {
        participants: outcome.participants.clone(),
        consensus,
        collaboration_rounds: rounds,
        termination: outcome.termination,
        accuracy: None,
        confidence: None,
        consistency: Vec::new(),
        notices,
    };

    if !qs.is_keyed() {
        report
            .notices
            .push("Dataset has no answer keys; accuracy, confidence and consistency tables are omitted.".into());
        return Ok(report);
    }

    let initial_acc = metrics::accuracy(&outcome, qs, EvalStage::Initial)?;
    let post_acc = if rounds > 0 {
        Some(metrics::accuracy(&outcome, qs, EvalStage::PostCollaboration)?)
    } else {
        None
    };
    report.accuracy = Some((initial_acc, post_acc));

    if rounds > 0 {
        let mut rows = Vec::new();
        for model in &outcome.participants {
            match metrics::confidence(&outcome, model) {
                Ok(c) => {
                    if c.is_partial() {
                        report.notices.push(format!(
                            "{model}: one support class is empty; confidence uses the other component only."
                        ));
                    }
                    rows.push((model.clone(), Some(c)));
                }
                Err(MetricsError::EmptySupportClasses(_)) => {
                    report.notices.push(format!(
                        "{model}: both support classes are empty; confidence is undefined."
                    ));
                    rows.push((model.clone(), None));
                }
                Err(e) => return Err(e.into()),
            }
        }
        report.confidence = Some(rows);
    } else {
        report
            .notices
            .push("No collaboration round ran; only initial-stage tables are reported.".into());
    }

    for &stage in stages {
        for model in &outcome.participants {
            report
                .consistency
                .push(metrics::consistency_report(&outcome, qs, model, stage)?);
        }
    }
    Ok(report)
}

fn f2(v: f64) -> String {
    format!("{v:.2}")
}

fn opt2(v: Option<f64>) -> String {
    v.map(f2).unwrap_or_default()
}

fn na(v: Option<f64>) -> String {
    v.map(f2).unwrap_or_else(|| "n/a".into())
}

fn stage_name(stage: EvalStage) -> &'static str {
    match stage {
        EvalStage::Initial => "initial",
        EvalStage::PostCollaboration => "post_collaboration",
    }
}

fn termination_name(t: Option<Termination>) -> &'static str {
    match t {
        Some(Termination::ThresholdMet) => "threshold_met",
        Some(Termination::RoundCapReached) => "round_cap_reached",
        None => "incomplete",
    }
}

fn step_label(step: Option<u8>) -> String {
    step.map_or_else(|| "Overall".into(), |s| format!("Step {s}"))
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

/// Rendered report files as (file name, contents), in a fixed order.
pub fn render(report: &MetricsReport) -> Vec<(&'static str, Vec<u8>)> {
    let mut files = Vec::new();

    let consensus_rows: Vec<Vec<String>> = report
        .consensus
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.questions.to_string(),
                r.initial_agreed.to_string(),
                f2(r.initial_rate),
                r.final_agreed.map(|a| a.to_string()).unwrap_or_default(),
                opt2(r.final_rate),
                opt2(r.delta()),
            ]
        })
        .collect();
    files.push((
        "consensus.csv",
        csv_bytes(
            &[
                "step",
                "questions",
                "initial_agreed",
                "initial_rate",
                "final_agreed",
                "final_rate",
                "delta",
            ],
            &consensus_rows,
        ),
    ));

    let mut acc_rows = Vec::new();
    if let Some((initial, post)) = &report.accuracy {
        for (i, model) in initial.iter().enumerate() {
            let after = post.as_ref().map(|p| &p[i]);
            for (j, cell) in model.cells.iter().enumerate() {
                let post_cell = after.map(|a| &a.cells[j]);
                acc_rows.push(vec![
                    model.model_id.clone(),
                    step_label(cell.step),
                    cell.total.to_string(),
                    cell.correct.to_string(),
                    f2(cell.percent),
                    post_cell.map(|c| c.correct.to_string()).unwrap_or_default(),
                    opt2(post_cell.map(|c| c.percent)),
                    opt2(post_cell.map(|c| c.percent - cell.percent)),
                ]);
            }
        }
        files.push((
            "accuracy.csv",
            csv_bytes(
                &[
                    "model",
                    "step",
                    "questions",
                    "initial_correct",
                    "initial_accuracy",
                    "post_correct",
                    "post_accuracy",
                    "delta",
                ],
                &acc_rows,
            ),
        ));
    }

    if let Some(conf) = &report.confidence {
        let mut header = vec!["row"];
        header.extend(conf.iter().map(|(m, _)| m.as_str()));
        let pick = |f: &dyn Fn(&ConfidenceReport) -> String| -> Vec<String> {
            conf.iter()
                .map(|(_, c)| c.as_ref().map(f).unwrap_or_else(|| "n/a".into()))
                .collect()
        };
        let row = |label: &str, values: Vec<String>| {
            let mut r = vec![label.to_string()];
            r.extend(values);
            r
        };
        let rows = vec![
            row(
                "without_support",
                pick(&|c| na(c.p_insist_without_support.map(|p| 100.0 * p))),
            ),
            row(
                "with_support",
                pick(&|c| na(c.p_insist_with_support.map(|p| 100.0 * p))),
            ),
            row("confidence", pick(&|c| f2(c.confidence))),
            row("s_minus_questions", pick(&|c| c.support_counts.1.to_string())),
            row("s_plus_questions", pick(&|c| c.support_counts.0.to_string())),
        ];
        files.push(("confidence.csv", csv_bytes(&header, &rows)));
    }

    if !report.consistency.is_empty() {
        let rows: Vec<Vec<String>> = report
            .consistency
            .iter()
            .map(|c| {
                vec![
                    c.model_id.clone(),
                    stage_name(c.stage).into(),
                    opt2(c.avg_count_correct),
                    opt2(c.avg_count_incorrect),
                    opt2(c.difference),
                    format!("{:.4}", c.overall),
                ]
            })
            .collect();
        files.push((
            "consistency.csv",
            csv_bytes(
                &[
                    "model",
                    "stage",
                    "avg_count_correct",
                    "avg_count_incorrect",
                    "delta",
                    "overall",
                ],
                &rows,
            ),
        ));
    }

    files.push(("summary.txt", summary_text(report).into_bytes()));
    files
}

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(header));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
    out.push('\n');
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn summary_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Participants: {}", report.participants.join(", "));
    let _ = writeln!(out, "Collaboration rounds: {}", report.collaboration_rounds);
    let _ = writeln!(out, "Termination: {}", termination_name(report.termination));
    out.push('\n');

    let _ = writeln!(out, "Consensus convergence (%)");
    let rows: Vec<Vec<String>> = report
        .consensus
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.questions.to_string(),
                f2(r.initial_rate),
                na(r.final_rate),
                na(r.delta()),
            ]
        })
        .collect();
    table(
        &mut out,
        &strings(&["", "questions", "initial", "final", "delta"]),
        &rows,
    );

    if let Some((initial, post)) = &report.accuracy {
        let _ = writeln!(out, "Accuracy (%)");
        let mut rows = Vec::new();
        for (i, model) in initial.iter().enumerate() {
            for (j, cell) in model.cells.iter().enumerate() {
                let after = post.as_ref().map(|p| p[i].cells[j].percent);
                rows.push(vec![
                    model.model_id.clone(),
                    step_label(cell.step),
                    f2(cell.percent),
                    na(after),
                    na(after.map(|a| a - cell.percent)),
                ]);
            }
        }
        table(
            &mut out,
            &strings(&["model", "step", "initial", "post", "delta"]),
            &rows,
        );
    }

    if let Some(conf) = &report.confidence {
        let _ = writeln!(out, "Confidence");
        let mut header = vec![String::new()];
        header.extend(conf.iter().map(|(m, _)| m.clone()));
        let row = |label: &str, f: &dyn Fn(&ConfidenceReport) -> String| {
            let mut r = vec![label.to_string()];
            r.extend(
                conf.iter()
                    .map(|(_, c)| c.as_ref().map(f).unwrap_or_else(|| "n/a".into())),
            );
            r
        };
        let rows = vec![
            row("W/O support (%)", &|c| {
                na(c.p_insist_without_support.map(|p| 100.0 * p))
            }),
            row("W/ support (%)", &|c| na(c.p_insist_with_support.map(|p| 100.0 * p))),
            row("Confidence", &|c| f2(c.confidence)),
        ];
        table(&mut out, &header, &rows);
    }

    if !report.consistency.is_empty() {
        let _ = writeln!(out, "Consistency (average majority-vote count)");
        let rows: Vec<Vec<String>> = report
            .consistency
            .iter()
            .map(|c| {
                vec![
                    c.model_id.clone(),
                    stage_name(c.stage).into(),
                    na(c.avg_count_correct),
                    na(c.avg_count_incorrect),
                    na(c.difference),
                    format!("{:.4}", c.overall),
                ]
            })
            .collect();
        table(
            &mut out,
            &strings(&["model", "stage", "correct", "incorrect", "delta", "overall"]),
            &rows,
        );
    }

    for notice in &report.notices {
        let _ = writeln!(out, "Note: {notice}");
    }
    out
}

/// Computes metrics and writes every report file into `dir`. Nothing is
/// written when the run has no completed round.
pub fn emit_reports(dir: &Path, outcome: &RunOutcome, qs: &QuestionSet) -> Result<MetricsReport, ReportError> {
    let report = compute_metrics(outcome, qs)?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, bytes) in render(&report) {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    }
    Ok(report)
}
