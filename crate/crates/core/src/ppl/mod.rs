//! Perplexity-based identification baseline: generate texts from endpoints
//! under prompt suites, score them under the reference model, sweep
//! thresholds and emit ROC curves.

mod perplexity;
mod roc;
mod score;
mod suite;

pub use perplexity::{perplexity, perplexity_conditioned, perplexity_ids};
pub use roc::{roc_from_scores, RocCurve};
pub use score::{mean_perplexity, score_suite, PplSample, ScoreOutcome, SkippedSample};
pub use suite::{build_suites, PromptSuite, SuiteKind};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum PplError {
    #[error("text yields {0} tokens; need at least two to score")]
    TooShort(usize),
    #[error("roc needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error(transparent)]
    Zoo(#[from] crate::zoo::ZooError),
}
