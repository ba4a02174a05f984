//! The model zoo: tiny decoder-only chat LMs playing the reference and
//! confuser roles, plus training, persistence, chat templating, sampling
//! and the rule-based responder.

mod corpus;
mod manifest;
mod model;
mod rule_based;
mod sample;
mod template;
mod train;
mod weights;

pub use corpus::{
    topic_bank,
    corpus_text, digit_answer, digit_prompt, random_digits, synth_corpus, ChatDoc, CorpusStyle,
};
pub use manifest::{ManifestEntry, ModelKind, ZooManifest, ZooRole, MANIFEST_VERSION};
pub use model::{param_spec, KvCache, LmConfig, LmModel};
pub use rule_based::RuleBasedResponder;
pub use sample::{generate, sample_token, GenerationConfig};
pub use template::ChatTemplate;
pub use train::{train, TrainConfig, TrainReport};
pub use weights::{load_model, save_model};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum ZooError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("context overflow: need {need} positions, model has {have}")]
    ContextOverflow { need: usize, have: usize },
    #[error("non-finite logits at position {position}")]
    NonFiniteLogits { position: usize },
    #[error("sequence of {0} tokens is too short")]
    SequenceTooShort(usize),
    #[error("weights file: {0}")]
    Weights(String),
    #[error("weights file has unsupported magic/version")]
    BadMagic,
    #[error("weights file truncated")]
    Truncated,
    #[error("weights checksum mismatch: header {expected:08x}, payload {found:08x}")]
    ChecksumMismatch { expected: u32, found: u32 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}
