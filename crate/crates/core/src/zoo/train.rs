use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Graph;
use crate::rng::substream;
use crate::tokenizer::{TokenId, Vocab};

use super::{ChatDoc, ChatTemplate, LmConfig, LmModel, ZooError};

/// Next-token training hyperparameters. Training is single-threaded per
/// model; deterministic given (config, corpus, seed).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Documents longer than this many tokens are skipped.
    pub max_doc_len: usize,
    pub val_docs: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 1200, batch: 8, lr: 1.5e-3, max_doc_len: 80, val_docs: 16, clip: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub used_docs: usize,
    pub skipped_docs: usize,
    pub final_loss: f64,
    pub val_loss: f64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;

/// Trains a next-token LM on rendered chat documents. Aborts with a
/// diagnostic if the loss turns non-finite.
pub fn train(
    config: &LmConfig,
    tc: &TrainConfig,
    vocab: &Vocab,
    docs: &[ChatDoc],
    template: &ChatTemplate,
) -> Result<(LmModel, TrainReport), ZooError> {
    config.validate()?;
    if config.vocab_size != vocab.size() {
        return Err(ZooError::Config(format!(
            "config vocab_size {} != vocab size {}",
            config.vocab_size,
            vocab.size()
        )));
    }
    let mut rendered: Vec<Vec<TokenId>> = Vec::with_capacity(docs.len());
    let mut skipped = 0usize;
    for d in docs {
        let ids = template.render_document(vocab, &d.user, &d.answer);
        if ids.len() < 8 || ids.len() > tc.max_doc_len {
            skipped += 1;
            continue;
        }
        rendered.push(ids);
    }
    if rendered.len() <= tc.val_docs {
        return Err(ZooError::Config(format!(
            "only {} usable docs for {} validation docs",
            rendered.len(),
            tc.val_docs
        )));
    }
    let (train_docs, val_docs) = rendered.split_at(rendered.len() - tc.val_docs);

    let mut model = LmModel::init(config.clone(), &mut substream(config.seed, "init"))?;
    let names: Vec<String> = model.param_names().to_vec();
    let mut m_state: Vec<Vec<f64>> =
        names.iter().map(|n| vec![0.0; model.param(n).numel()]).collect();
    let mut v_state: Vec<Vec<f64>> =
        names.iter().map(|n| vec![0.0; model.param(n).numel()]).collect();

    let mut batch_rng = substream(config.seed, "batch");
    let mut last_loss = f64::NAN;
    for step in 0..tc.steps {
        let mut grads: Vec<Vec<f64>> =
            names.iter().map(|n| vec![0.0; model.param(n).numel()]).collect();
        let mut loss_sum = 0.0f64;
        for _ in 0..tc.batch {
            let doc = &train_docs[batch_rng.gen_range(0..train_docs.len())];
            let mut g = Graph::new();
            let logits = model.graph_for_ids(&mut g, doc)?;
            let pairs: Vec<(usize, usize)> =
                (0..doc.len() - 1).map(|i| (i, doc[i + 1] as usize)).collect();
            let loss = g.ce_at_positions(logits, pairs)?;
            loss_sum += g.value(loss).item() as f64;
            g.backward(loss)?;
            let param_nodes = g.input_grads();
            for (name, acc) in names.iter().zip(grads.iter_mut()) {
                let t = &param_nodes[name];
                for (a, &gv) in acc.iter_mut().zip(t.data()) {
                    *a += gv as f64;
                }
            }
        }
        let batch_loss = loss_sum / tc.batch as f64;
        if !batch_loss.is_finite() {
            return Err(ZooError::Divergence { step, loss: batch_loss });
        }
        last_loss = batch_loss;

        let inv_batch = 1.0 / tc.batch as f64;
        for gacc in grads.iter_mut() {
            for v in gacc.iter_mut() {
                *v *= inv_batch;
            }
        }
        if tc.clip > 0.0 {
            let norm: f64 =
                grads.iter().flat_map(|g| g.iter()).map(|&v| v * v).sum::<f64>().sqrt();
            if norm > tc.clip {
                let s = tc.clip / norm;
                for gacc in grads.iter_mut() {
                    for v in gacc.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }

        // Adam with linear decay to 10% of the base rate
        let t = (step + 1) as f64;
        let decay = 1.0 - 0.9 * step as f64 / tc.steps as f64;
        let bias = (1.0 - ADAM_B2.powf(t)).sqrt() / (1.0 - ADAM_B1.powf(t));
        let lr_t = tc.lr * decay * bias;
        for ((name, gacc), (ms, vs)) in names
            .iter()
            .zip(grads.iter())
            .zip(m_state.iter_mut().zip(v_state.iter_mut()))
        {
            let tensor = model.param_mut(name);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                ms[i] = ADAM_B1 * ms[i] + (1.0 - ADAM_B1) * gacc[i];
                vs[i] = ADAM_B2 * vs[i] + (1.0 - ADAM_B2) * gacc[i] * gacc[i];
                data[i] = (data[i] as f64 - lr_t * ms[i] / (vs[i].sqrt() + ADAM_EPS)) as f32;
            }
        }
    }

    let mut val_sum = 0.0f64;
    for doc in val_docs {
        val_sum += model.sequence_ce(doc, 1)?;
    }
    let val_loss = val_sum / val_docs.len() as f64;
    if !val_loss.is_finite() {
        return Err(ZooError::Divergence { step: tc.steps, loss: val_loss });
    }

    Ok((
        model,
        TrainReport {
            steps: tc.steps,
            used_docs: rendered.len(),
            skipped_docs: skipped,
            final_loss: last_loss,
            val_loss,
        },
    ))
}
