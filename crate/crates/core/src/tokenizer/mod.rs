//! Shared fixed-vocabulary tokenizer and the candidate-token filter.
//!
//! One vocabulary is trained over the synthetic corpus and shared by every
//! model in the zoo. The filter derives the set of forbidden substitution
//! tokens from a number-word lexicon plus structural rules (digit
//! characters, Roman numerals, century names, non-ASCII tokens).

mod filter;
mod lexicon;
mod vocab;

pub use filter::{build_filter, build_filter_with, FilterMode, TokenFilter};
pub use lexicon::{FilterLexicon, LexiconCategory};
pub use vocab::{ReservedIds, Vocab, N_RESERVED};

use thiserror::Error;

pub type TokenId = u32;

#[derive(Error, Debug)]
pub enum TokenizerError {
    #[error("duplicate token bytes for id {0}")]
    DuplicateToken(TokenId),
    #[error("token id {0} decodes to an empty string")]
    EmptyToken(TokenId),
    #[error("reserved slot {index} must be {expected:?}, found {found:?}")]
    BadReserved { index: usize, expected: String, found: String },
    #[error("vocabulary has {0} tokens, below the minimum of {1}")]
    TooSmall(usize, usize),
    #[error("malformed lexicon: {0}")]
    MalformedLexicon(String),
    #[error("unknown filter mode {0:?}")]
    UnknownMode(String),
    #[error("vocab file: {0}")]
    VocabFile(String),
}
