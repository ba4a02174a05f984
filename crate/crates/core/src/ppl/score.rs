use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::ChatEndpoint;
use crate::rng::substream_indexed;
use crate::tokenizer::Vocab;
use crate::zoo::{ChatTemplate, GenerationConfig, LmModel};

use super::{PromptSuite, SuiteKind};

/// Cap on continuation tokens entering the perplexity computation.
pub const MAX_SCORED_TOKENS: usize = 512;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PplSample {
    pub endpoint_id: String,
    pub suite: SuiteKind,
    pub prompt: String,
    pub text: String,
    pub scored_tokens: usize,
    pub perplexity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkippedSample {
    pub endpoint_id: String,
    pub prompt: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub samples: Vec<PplSample>,
    pub skipped: Vec<SkippedSample>,
}

/// One generation and one reference-model perplexity per (endpoint,
/// prompt). Perplexity is computed over the generated continuation only,
/// conditioned on the rendered chat prompt, from the observed text alone.
pub fn score_suite(
    reference: &LmModel,
    vocab: &Vocab,
    template: &ChatTemplate,
    endpoints: &[&ChatEndpoint],
    suite: &PromptSuite,
    gen: &GenerationConfig,
) -> ScoreOutcome {
    let jobs: Vec<(usize, usize)> = (0..endpoints.len())
        .flat_map(|e| (0..suite.prompts.len()).map(move |p| (e, p)))
        .collect();
    let results: Vec<Result<PplSample, SkippedSample>> = jobs
        .par_iter()
        .map(|&(e, p)| {
            let endpoint = endpoints[e];
            let prompt = &suite.prompts[p];
            let stream = format!("ppl:{}:{}", suite.kind.name(), endpoint.id());
            let seed: u64 = substream_indexed(gen.seed, &stream, p as u64).gen();
            let g = GenerationConfig { seed, ..*gen };
            let skip = |reason: String| SkippedSample {
                endpoint_id: endpoint.id().to_string(),
                prompt: prompt.clone(),
                reason,
            };
            let text = endpoint
                .chat(prompt, &g)
                .map_err(|err| skip(format!("endpoint error: {err}")))?;
            if text.trim().is_empty() {
                return Err(skip("empty generation".into()));
            }
            let mut ids = vocab.encode(&text);
            ids.truncate(MAX_SCORED_TOKENS);
            let capped = vocab.decode(&ids);
            match super::perplexity_conditioned(reference, vocab, template, prompt, &capped) {
                Ok(perplexity) => Ok(PplSample {
                    endpoint_id: endpoint.id().to_string(),
                    suite: suite.kind,
                    prompt: prompt.clone(),
                    text,
                    scored_tokens: ids.len(),
                    perplexity,
                }),
                Err(err) => Err(skip(format!("scoring failed: {err}"))),
            }
        })
        .collect();
    let mut outcome = ScoreOutcome { samples: Vec::new(), skipped: Vec::new() };
    for r in results {
        match r {
            Ok(s) => outcome.samples.push(s),
            Err(s) => outcome.skipped.push(s),
        }
    }
    outcome
}

/// Mean perplexity of one endpoint's samples; None when it has no samples.
pub fn mean_perplexity(samples: &[PplSample], endpoint_id: &str) -> Option<f64> {
    let scores: Vec<f64> = samples
        .iter()
        .filter(|s| s.endpoint_id == endpoint_id)
        .map(|s| s.perplexity)
        .collect();
    if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}
