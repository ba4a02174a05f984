use serde::{Deserialize, Serialize};

use super::corpus::digit_answer;

/// Hand-written responder that always answers the digit task with the same
/// number, emulating models whose answer distribution collapses to a single
/// fingerprint. Deterministic regardless of sampling settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RuleBasedResponder {
    /// Digits are taken from the front of this cycle, e.g. "12345" answers
    /// the 4-digit task with "1234".
    pub answer_cycle: String,
}

impl Default for RuleBasedResponder {
    fn default() -> Self {
        RuleBasedResponder { answer_cycle: "1234512345".into() }
    }
}

impl RuleBasedResponder {
    pub fn respond(&self, user_text: &str) -> String {
        match requested_digits(user_text) {
            Some(n) if n <= self.answer_cycle.len() => {
                digit_answer(n, &self.answer_cycle[..n])
            }
            _ => "I can only help with short random strings.".to_string(),
        }
    }
}

/// Extracts N from prompts shaped like "... composed of N digits ...".
fn requested_digits(user_text: &str) -> Option<usize> {
    let idx = user_text.find("composed of ")?;
    let rest = &user_text[idx + "composed of ".len()..];
    let num: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    num.parse().ok()
}
