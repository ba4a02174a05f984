//! Black-box model identity verification at desk scale.
//!
//! The toolkit trains a zoo of tiny decoder-only chat models, optimizes
//! filtered adversarial suffixes that pin a chosen reference model to a
//! predefined "random" number, and verifies unidentified chat-only models
//! against the reference with TPR/FPR/ROC statistics, alongside a
//! perplexity-based baseline detector.
//!
//! Module map:
//! - [`nn`]: dense numeric kernel with reverse-mode differentiation
//! - [`tokenizer`]: shared subword vocabulary and the candidate-token filter
//! - [`zoo`]: model definitions, training, sampling, persistence
//! - [`blackbox`]: chat-only endpoints, local and over HTTP
//! - [`gcg`]: the greedy coordinate gradient suffix optimizer
//! - [`verify`]: trials, rates, confusion matrices, operating points
//! - [`ppl`]: perplexity-based identification baseline
//! - [`exp`]: experiment orchestration shared by the CLI and tests

pub mod blackbox;
pub mod exp;
pub mod gcg;
pub mod nn;
pub mod ppl;
pub mod rng;
pub mod tokenizer;
pub mod verify;
pub mod zoo;
