//! Iterative multi-model collaboration for multiple-choice question answering.
//!
//! Participants answer every question by self-consistency sampling; questions
//! without unanimous agreement are reviewed again against an anonymized
//! transcript of everyone's answers and summarized reasonings, round after
//! round, until the consensus rate reaches a threshold. The crate also computes
//! accuracy, confidence and consistency metrics from a finished run and keeps
//! a replayable event log of every generation.

pub mod collab;
pub mod consensus;
pub mod dataset;
pub mod gateway;
pub mod metrics;
pub mod prompt;
pub mod report;
pub mod run;
pub mod sc;
pub mod store;
