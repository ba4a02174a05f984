//! The decision layer: run suffixed prompts against endpoints, parse
//! answers, and aggregate true/false positive rates with the analytic
//! false-positive floor, confusion matrices and discrete ROC points.

mod parse;
mod report;
mod trials;

pub use parse::parse_answer;
pub use report::{
    build_report, collect_answer_distribution, confusion_matrix, trap_roc_points,
    AnswerDistribution, ConfusionMatrix, EndpointCounts, TrapRocPoints, VerificationReport,
};
pub use trials::{read_trials_jsonl, run_trials, write_trials_jsonl, TrialOutcome, Verdict};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum VerifyError {
    #[error("no outcomes to aggregate")]
    EmptyOutcomes,
    #[error("outcomes reference unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("outcomes reference unknown suffix {0:?}")]
    UnknownSuffix(String),
    #[error("need reports for at least two answer lengths, got {0}")]
    NeedMultipleN(usize),
    #[error("io: {0}")]
    Io(String),
}
