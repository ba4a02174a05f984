use crate::nn::log_sum_exp_row;
use crate::tokenizer::{TokenId, Vocab};
use crate::zoo::{ChatTemplate, LmModel};

use super::PplError;

/// exp of the mean negative log-likelihood per scored token. Trailing pad
/// tokens are excluded before scoring.
pub fn perplexity_ids(model: &LmModel, pad: TokenId, ids: &[TokenId]) -> Result<f64, PplError> {
    let trimmed = trim_trailing_pad(ids, pad);
    if trimmed.len() < 2 {
        return Err(PplError::TooShort(trimmed.len()));
    }
    let lp = model.logprobs(trimmed)?;
    let mean_nll = -lp.iter().sum::<f64>() / lp.len() as f64;
    Ok(mean_nll.exp())
}

/// Perplexity of a standalone text under the model.
pub fn perplexity(model: &LmModel, vocab: &Vocab, text: &str) -> Result<f64, PplError> {
    let ids = vocab.encode(text);
    perplexity_ids(model, vocab.reserved().pad, &ids)
}

/// Perplexity of a continuation given the rendered chat prompt context.
/// Every continuation token is scored; the prompt itself is not.
pub fn perplexity_conditioned(
    model: &LmModel,
    vocab: &Vocab,
    template: &ChatTemplate,
    prompt_text: &str,
    continuation: &str,
) -> Result<f64, PplError> {
    let context = template.render_prompt(vocab, prompt_text);
    let cont_ids = vocab.encode(continuation);
    let trimmed = trim_trailing_pad(&cont_ids, vocab.reserved().pad);
    if trimmed.is_empty() {
        return Err(PplError::TooShort(0));
    }
    let mut cache = model.new_cache();
    let mut all = context.clone();
    all.extend_from_slice(trimmed);
    // rows for positions context_len-1 .. end-1 predict each continuation token
    let rows = model.forward_cached(&mut cache, &all[..all.len() - 1], context.len() - 1)?;
    let mut nll = 0.0f64;
    for (row, &tok) in rows.iter().zip(trimmed.iter()) {
        nll += log_sum_exp_row(row) - row[tok as usize] as f64;
    }
    Ok((nll / trimmed.len() as f64).exp())
}

fn trim_trailing_pad(ids: &[TokenId], pad: TokenId) -> &[TokenId] {
    let mut end = ids.len();
    while end > 0 && ids[end - 1] == pad {
        end -= 1;
    }
    &ids[..end]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};
    use crate::rng::substream;
    use crate::zoo::LmConfig;
    use std::collections::HashMap;

    fn vocab() -> Vocab {
        Vocab::train(&["some words to score and keep scoring again and again"], 24)
    }

    fn config(v: &Vocab) -> LmConfig {
        LmConfig {
            vocab_size: v.size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 64,
            seed: 2,
        }
    }

    /// All-zero weights give exactly uniform next-token logits.
    fn uniform_model(v: &Vocab) -> LmModel {
        let cfg = config(v);
        let named: HashMap<String, Tensor> = crate::zoo::param_spec(&cfg)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .collect();
        LmModel::from_tensors(cfg, named).unwrap()
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let v = vocab();
        let m = uniform_model(&v);
        let p = perplexity(&m, &v, "some words to score").unwrap();
        assert!((p - v.size() as f64).abs() < 1e-6, "{p} vs {}", v.size());
    }

    #[test]
    fn perplexity_is_at_least_one() {
        let v = vocab();
        let m = LmModel::init(config(&v), &mut substream(2, "init")).unwrap();
        let p = perplexity(&m, &v, "words to score again").unwrap();
        assert!(p >= 1.0);
    }

    #[test]
    fn single_token_text_is_error() {
        let v = vocab();
        let m = uniform_model(&v);
        assert!(matches!(perplexity(&m, &v, "x"), Err(PplError::TooShort(1))));
        assert!(matches!(perplexity(&m, &v, ""), Err(PplError::TooShort(0))));
    }

    #[test]
    fn trailing_pads_do_not_change_perplexity() {
        let v = vocab();
        let m = LmModel::init(config(&v), &mut substream(3, "init")).unwrap();
        let mut ids = v.encode("some words to score");
        let base = perplexity_ids(&m, v.reserved().pad, &ids).unwrap();
        ids.extend([v.reserved().pad; 3]);
        let padded = perplexity_ids(&m, v.reserved().pad, &ids).unwrap();
        assert_eq!(base.to_bits(), padded.to_bits());
    }

    #[test]
    fn log_perplexity_matches_graph_cross_entropy() {
        let v = vocab();
        let m = LmModel::init(config(&v), &mut substream(4, "init")).unwrap();
        let text = "words to score and keep";
        let ids = v.encode(text);
        let p = perplexity(&m, &v, text).unwrap();

        let mut g = Graph::new();
        let logits = m.graph_for_ids(&mut g, &ids).unwrap();
        let scored = g.slice_rows(logits, 0, ids.len() - 1).unwrap();
        let targets: Vec<usize> = ids[1..].iter().map(|&t| t as usize).collect();
        let ce = g.cross_entropy_target(scored, &targets).unwrap();
        let ce_val = g.value(ce).item() as f64;
        assert!(
            (p.ln() - ce_val).abs() < 1e-4,
            "log ppl {} vs graph ce {ce_val}",
            p.ln()
        );
    }

    #[test]
    fn conditioned_scoring_uses_prompt_context() {
        let v = vocab();
        let m = LmModel::init(config(&v), &mut substream(5, "init")).unwrap();
        let t = ChatTemplate::default();
        let a = perplexity_conditioned(&m, &v, &t, "score words", " some words").unwrap();
        let b = perplexity_conditioned(&m, &v, &t, "keep scoring", " some words").unwrap();
        assert!(a.is_finite() && b.is_finite());
        assert_ne!(a.to_bits(), b.to_bits(), "different contexts should score differently");
    }
}
