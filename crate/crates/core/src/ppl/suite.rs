use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::zoo::{topic_bank, CorpusStyle};

/// The three prompt styles the baseline sweeps over; identification quality
/// varies by style, which is the point of reporting per-suite curves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    CreativeWriting,
    Qa,
    Encyclopedia,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 3] =
        [SuiteKind::CreativeWriting, SuiteKind::Qa, SuiteKind::Encyclopedia];

    pub fn name(&self) -> &'static str {
        match self {
            SuiteKind::CreativeWriting => "creative_writing",
            SuiteKind::Qa => "qa",
            SuiteKind::Encyclopedia => "encyclopedia",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptSuite {
    pub kind: SuiteKind,
    pub prompts: Vec<String>,
}

/// Synthesizes all three suites from the repo-owned topic lists. Prompts
/// draw from both topic banks so neither corpus style is favored.
pub fn build_suites(per_suite: usize, seed: u64) -> Vec<PromptSuite> {
    let topics: Vec<&str> = topic_bank(CorpusStyle::Alpha)
        .iter()
        .chain(topic_bank(CorpusStyle::Beta).iter())
        .copied()
        .collect();
    SuiteKind::ALL
        .iter()
        .map(|&kind| {
            let mut rng = substream(seed, &format!("suite-{}", kind.name()));
            let prompts = (0..per_suite)
                .map(|_| {
                    let a = topics[rng.gen_range(0..topics.len())];
                    let b = topics[rng.gen_range(0..topics.len())];
                    match kind {
                        SuiteKind::CreativeWriting => {
                            format!("Write a short fictional story about what follows. {a}")
                        }
                        SuiteKind::Qa => format!("What can you say about {a} and {b}?"),
                        SuiteKind::Encyclopedia => {
                            format!("Write a 200 word wikipedia style introduction on {a}")
                        }
                    }
                })
                .collect();
            PromptSuite { kind, prompts }
        })
        .collect()
}
