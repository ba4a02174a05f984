use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::zoo::{digit_answer, digit_prompt, random_digits};

use super::GcgError;

/// One fingerprinting task instance: ask for a random N-digit string while
/// the optimized suffix pins the answer to a predefined target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapTask {
    pub n: usize,
    pub target: String,
    pub prompt: String,
}

impl TrapTask {
    pub fn new(n: usize, target: impl Into<String>) -> Result<TrapTask, GcgError> {
        let target = target.into();
        if target.len() != n || !target.chars().all(|c| c.is_ascii_digit()) {
            return Err(GcgError::Task(format!(
                "target {target:?} is not a {n}-digit string"
            )));
        }
        Ok(TrapTask { n, target, prompt: digit_prompt(n) })
    }

    /// Task with a uniformly random target.
    pub fn random(n: usize, rng: &mut impl Rng) -> TrapTask {
        let target = random_digits(n, rng);
        TrapTask { n, target: target.clone(), prompt: digit_prompt(n) }
    }

    /// The string whose likelihood the optimizer maximizes.
    pub fn target_output(&self) -> String {
        digit_answer(self.n, &self.target)
    }
}
