//! Targeted adversarial suffix optimization: greedy coordinate gradient
//! search over suffix tokens with candidate filtering, loss tracking,
//! best-step selection, an optional prompt-likelihood penalty, and an
//! ensemble-of-models objective.

mod optimizer;
mod task;

pub use optimizer::{brute_force_step, GcgConfig, SuffixRecord, TrapObjective};
pub use task::TrapTask;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum GcgError {
    #[error("task: {0}")]
    Task(String),
    #[error("config: {0}")]
    Config(String),
    #[error("candidate pool is empty: the filter leaves no substitutable tokens")]
    EmptyCandidatePool,
    #[error("vocab mismatch across ensemble: {0}")]
    VocabMismatch(String),
    #[error("suffix record: {0}")]
    Record(String),
    #[error(transparent)]
    Zoo(#[from] crate::zoo::ZooError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}
