use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::ChatEndpoint;
use crate::gcg::SuffixRecord;
use crate::rng::substream_indexed;
use crate::zoo::GenerationConfig;

use super::{parse_answer, VerifyError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Hit,
    Miss,
    Invalid,
    /// Transport failure; excluded from every rate denominator.
    Error,
}

/// One completion of one (suffix, endpoint) pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub suffix_id: String,
    pub endpoint_id: String,
    pub trial: usize,
    pub n: usize,
    pub target: String,
    pub raw_text: String,
    pub parsed: Option<String>,
    pub verdict: Verdict,
}

impl TrialOutcome {
    pub fn answered(&self) -> bool {
        self.verdict != Verdict::Error
    }
}

/// Runs `trials` completions of the suffixed prompt against one endpoint.
/// Each trial draws its own seed from the generation seed, the ids and the
/// trial index, so runs are reproducible and trials are independent.
pub fn run_trials(
    suffix: &SuffixRecord,
    suffix_id: &str,
    endpoint: &ChatEndpoint,
    gen: &GenerationConfig,
    trials: usize,
) -> Vec<TrialOutcome> {
    let prompt = format!("{} {}", suffix.task.prompt, suffix.suffix_text);
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let stream = format!("trial:{}:{}", suffix_id, endpoint.id());
            let seed: u64 = substream_indexed(gen.seed, &stream, trial as u64).gen();
            let trial_gen = GenerationConfig { seed, ..*gen };
            match endpoint.chat(&prompt, &trial_gen) {
                Ok(text) => {
                    let parsed = parse_answer(&text, suffix.task.n);
                    let verdict = match &parsed {
                        Some(p) if *p == suffix.task.target => Verdict::Hit,
                        Some(_) => Verdict::Miss,
                        None => Verdict::Invalid,
                    };
                    TrialOutcome {
                        suffix_id: suffix_id.to_string(),
                        endpoint_id: endpoint.id().to_string(),
                        trial,
                        n: suffix.task.n,
                        target: suffix.task.target.clone(),
                        raw_text: text,
                        parsed,
                        verdict,
                    }
                }
                Err(e) => TrialOutcome {
                    suffix_id: suffix_id.to_string(),
                    endpoint_id: endpoint.id().to_string(),
                    trial,
                    n: suffix.task.n,
                    target: suffix.task.target.clone(),
                    raw_text: format!("transport error: {e}"),
                    parsed: None,
                    verdict: Verdict::Error,
                },
            }
        })
        .collect()
}

/// Trial log format: JSON-lines, one outcome per line.
pub fn write_trials_jsonl(path: &Path, outcomes: &[TrialOutcome]) -> Result<(), VerifyError> {
    let f = std::fs::File::create(path).map_err(|e| VerifyError::Io(e.to_string()))?;
    let mut w = BufWriter::new(f);
    for o in outcomes {
        serde_json::to_writer(&mut w, o).map_err(|e| VerifyError::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| VerifyError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| VerifyError::Io(e.to_string()))
}

pub fn read_trials_jsonl(path: &Path) -> Result<Vec<TrialOutcome>, VerifyError> {
    let f = std::fs::File::open(path).map_err(|e| VerifyError::Io(e.to_string()))?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| VerifyError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| VerifyError::Io(e.to_string()))?);
    }
    Ok(out)
}
