use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::tokenizer::{TokenId, Vocab};

use super::{ChatTemplate, LmModel, ZooError};

/// Decoding hyperparameters. Temperature 0 means greedy argmax; top_p = 1
/// keeps the full distribution.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        // default evaluation setting: nucleus sampling, top-p 0.9, temperature 0.6
        GenerationConfig { temperature: 0.6, top_p: 0.9, max_new_tokens: 48, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn greedy() -> Self {
        GenerationConfig { temperature: 0.0, top_p: 1.0, ..Default::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Temperature-then-nucleus sampling of a single token: scale logits,
/// softmax, sort by (probability desc, id asc), cut at the smallest prefix
/// with cumulative mass >= top_p, renormalize, draw. Tokens outside the
/// nucleus have sampling probability exactly zero.
pub fn sample_token(logits: &[f32], gen: &GenerationConfig, rng: &mut impl Rng) -> TokenId {
    if gen.temperature == 0.0 {
        return argmax(logits);
    }
    let probs = nucleus_distribution(logits, gen.temperature, gen.top_p);
    let u: f64 = rng.gen();
    let mut cum = 0.0f64;
    for &(id, p) in &probs {
        cum += p;
        if u < cum {
            return id;
        }
    }
    probs.last().expect("non-empty distribution").0
}

/// The renormalized nucleus as (token id, probability) pairs; ids outside
/// the nucleus are absent (probability exactly zero).
pub fn nucleus_distribution(logits: &[f32], temperature: f64, top_p: f64) -> Vec<(TokenId, f64)> {
    assert!(temperature > 0.0, "temperature 0 is greedy, not a distribution");
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let scaled: Vec<f64> = logits.iter().map(|&l| (l as f64 - max) / temperature).collect();
    let denom: f64 = scaled.iter().map(|&s| s.exp()).sum();
    let mut probs: Vec<(TokenId, f64)> = scaled
        .iter()
        .enumerate()
        .map(|(id, &s)| (id as TokenId, s.exp() / denom))
        .collect();
    // probability desc, id asc — fixes the cut when boundary values tie
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    if top_p < 1.0 {
        let mut cum = 0.0f64;
        let mut keep = probs.len();
        for (i, &(_, p)) in probs.iter().enumerate() {
            cum += p;
            if cum >= top_p {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
        let mass: f64 = probs.iter().map(|&(_, p)| p).sum();
        for e in probs.iter_mut() {
            e.1 /= mass;
        }
    }
    probs
}

fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Samples a chat completion: renders the prompt, decodes until eos,
/// max_new_tokens, or the context limit. Reproducible given the full
/// config including seed.
pub fn generate(
    model: &LmModel,
    vocab: &Vocab,
    template: &ChatTemplate,
    user_text: &str,
    gen: &GenerationConfig,
) -> Result<String, ZooError> {
    let prompt = template.render_prompt(vocab, user_text);
    let ctx = model.config().context_len;
    if prompt.len() + 1 > ctx {
        return Err(ZooError::ContextOverflow { need: prompt.len() + 1, have: ctx });
    }
    let mut rng = substream(gen.seed, "sample");
    let mut cache = model.new_cache();
    let mut logits = model
        .forward_cached(&mut cache, &prompt, prompt.len() - 1)?
        .pop()
        .expect("one logits row for the last prompt position");
    let eos = vocab.reserved().eos;
    let mut out: Vec<TokenId> = Vec::new();
    while out.len() < gen.max_new_tokens && cache.len() < ctx {
        let tok = sample_token(&logits, gen, &mut rng);
        if tok == eos {
            break;
        }
        out.push(tok);
        if out.len() == gen.max_new_tokens || cache.len() + 1 > ctx {
            break;
        }
        logits = model
            .forward_cached(&mut cache, &[tok], 0)?
            .pop()
            .expect("one logits row");
    }
    Ok(vocab.decode(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream_indexed;

    #[test]
    fn greedy_is_argmax_and_seed_free() {
        let logits = vec![0.1f32, 2.0, -1.0, 2.0, 0.5];
        let gen = GenerationConfig::greedy();
        for seed in 0..5u64 {
            let mut rng = substream_indexed(seed, "t", 0);
            // ties resolve to the lowest id
            assert_eq!(sample_token(&logits, &gen, &mut rng), 1);
        }
    }

    #[test]
    fn nucleus_excludes_tail_exactly() {
        // probabilities ~ [0.67, 0.24, 0.09, ...]: top_p=0.5 keeps one token
        let logits = vec![3.0f32, 2.0, 1.0, -5.0];
        let dist = nucleus_distribution(&logits, 1.0, 0.5);
        assert_eq!(dist.len(), 1);
        assert_eq!(dist[0].0, 0);
        assert!((dist[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_distribution_when_top_p_is_one() {
        let logits = vec![1.0f32, 0.5, 0.0, -0.5];
        let dist = nucleus_distribution(&logits, 1.0, 1.0);
        assert_eq!(dist.len(), logits.len());
        let total: f64 = dist.iter().map(|&(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn renormalized_nucleus_sums_to_one() {
        let logits = vec![2.0f32, 1.9, 0.3, 0.1, -2.0, -4.0];
        let dist = nucleus_distribution(&logits, 0.6, 0.9);
        let total: f64 = dist.iter().map(|&(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(dist.len() < logits.len());
    }

    #[test]
    fn empirical_frequencies_within_multinomial_bounds() {
        // top_p=1, τ=1 must reproduce softmax within 3σ over 10k draws
        let logits = vec![1.2f32, 0.1, -0.4, 0.9, 0.0, -1.5, 2.0, -0.8];
        let dist = nucleus_distribution(&logits, 1.0, 1.0);
        let n = 10_000usize;
        let gen = GenerationConfig { temperature: 1.0, top_p: 1.0, max_new_tokens: 1, seed: 0 };
        let mut rng = substream_indexed(42, "multinomial", 0);
        let mut counts = vec![0usize; logits.len()];
        for _ in 0..n {
            counts[sample_token(&logits, &gen, &mut rng) as usize] += 1;
        }
        for &(id, p) in &dist {
            let expect = p * n as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let diff = (counts[id as usize] as f64 - expect).abs();
            assert!(diff <= 3.0 * sigma, "token {id}: {} vs {expect} (3σ={})", counts[id as usize], 3.0 * sigma);
        }
    }

    #[test]
    fn out_of_nucleus_tokens_never_sampled() {
        let logits = vec![3.0f32, 2.0, 1.0, -5.0];
        let gen = GenerationConfig { temperature: 1.0, top_p: 0.5, max_new_tokens: 1, seed: 9 };
        let mut rng = substream_indexed(9, "nucleus", 0);
        for _ in 0..10_000 {
            assert_eq!(sample_token(&logits, &gen, &mut rng), 0);
        }
    }
}
