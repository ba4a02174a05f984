use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::{log_sum_exp_row, Graph, OneHotInput};
use crate::rng::substream;
use crate::tokenizer::{FilterMode, TokenFilter, TokenId, Vocab};
use crate::zoo::{ChatTemplate, KvCache, LmModel};

use super::{GcgError, TrapTask};

/// Greedy coordinate gradient settings. The paper-scale preset matches the
/// published hyperparameters; the desk preset is sized for tiny models.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GcgConfig {
    pub steps: usize,
    pub suffix_len: usize,
    pub topk: usize,
    pub batch: usize,
    pub filter_mode: FilterMode,
    pub ascii_only: bool,
    /// Weight of the optional prompt-likelihood penalty:
    /// (1-alpha)*ce + alpha*nll(prompt). Zero recovers the plain objective.
    pub alpha: f64,
    pub seed: u64,
}

impl GcgConfig {
    /// Published hyperparameters: 1500 steps, 20 suffix tokens, 512
    /// candidates out of the per-position top 256.
    pub fn paper(seed: u64) -> GcgConfig {
        GcgConfig {
            steps: 1500,
            suffix_len: 20,
            topk: 256,
            batch: 512,
            filter_mode: FilterMode::Full,
            ascii_only: true,
            alpha: 0.0,
            seed,
        }
    }

    /// Desk-scale preset: tiny models converge far faster.
    pub fn desk(seed: u64) -> GcgConfig {
        GcgConfig { steps: 300, topk: 64, batch: 128, ..GcgConfig::paper(seed) }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), GcgError> {
        if self.suffix_len == 0 || self.batch == 0 || self.topk == 0 {
            return Err(GcgError::Config("steps/suffix_len/topk/batch must be positive".into()));
        }
        if self.topk > vocab_size {
            return Err(GcgError::Config(format!(
                "topk {} exceeds vocab size {vocab_size}",
                self.topk
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(GcgError::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        Ok(())
    }
}

/// An optimized suffix with its full loss trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuffixRecord {
    pub task: TrapTask,
    pub config: GcgConfig,
    pub suffix_ids: Vec<TokenId>,
    pub suffix_text: String,
    pub loss_trace: Vec<f64>,
    pub best_step: usize,
    pub best_loss: f64,
    pub model_ids: Vec<String>,
    pub seed: u64,
    pub wall_ms: u64,
}

impl SuffixRecord {
    pub fn save(&self, path: &Path) -> Result<(), GcgError> {
        let json = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(path, json).map_err(|e| GcgError::Record(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<SuffixRecord, GcgError> {
        let json = std::fs::read_to_string(path).map_err(|e| GcgError::Record(e.to_string()))?;
        serde_json::from_str(&json).map_err(|e| GcgError::Record(e.to_string()))
    }
}

struct ModelState {
    id: String,
    model: Arc<LmModel>,
    prompt_cache: KvCache,
    /// Logits row at the last prefix position (predicts the first suffix
    /// token); constant across candidates.
    boundary_row: Vec<f32>,
    /// Negative log-likelihood summed over prefix positions 1..prefix_len.
    prefix_nll: f64,
}

/// The optimization objective for one task over an ensemble of white-box
/// models sharing a vocabulary. Holds per-model prompt caches so candidate
/// evaluation only recomputes the suffix and target region.
pub struct TrapObjective {
    states: Vec<ModelState>,
    vocab: Arc<Vocab>,
    task: TrapTask,
    alpha: f64,
    /// bos + system + user marker + base prompt; suffix slots follow.
    prefix: Vec<TokenId>,
    /// assistant marker + target output tokens.
    tail: Vec<TokenId>,
    /// Tokens usable as substitution candidates anywhere: allowed by the
    /// filter and separator-prefixed so the decoded suffix retokenizes to
    /// the same ids.
    candidate_ok: Vec<bool>,
    /// Additionally usable at slots after the first: single-digit byte
    /// tokens (when the filter permits digits). No vocabulary token
    /// contains a digit, so a lone digit always re-tokenizes to itself;
    /// slot zero still needs the separator the prompt join inserts.
    candidate_tail_ok: Vec<bool>,
}

impl TrapObjective {
    pub fn new(
        models: Vec<(String, Arc<LmModel>)>,
        vocab: Arc<Vocab>,
        template: &ChatTemplate,
        task: TrapTask,
        filter: &TokenFilter,
        alpha: f64,
    ) -> Result<TrapObjective, GcgError> {
        if models.is_empty() {
            return Err(GcgError::Config("no models in ensemble".into()));
        }
        for (id, m) in &models {
            if m.config().vocab_size != vocab.size() {
                return Err(GcgError::VocabMismatch(format!(
                    "model {id:?} has vocab {}, shared vocab is {}",
                    m.config().vocab_size,
                    vocab.size()
                )));
            }
        }
        if filter.vocab_size() != vocab.size() {
            return Err(GcgError::VocabMismatch(format!(
                "filter built for vocab {}, shared vocab is {}",
                filter.vocab_size(),
                vocab.size()
            )));
        }
        let prefix = template.render_user_prefix(&vocab, &task.prompt);
        let mut tail = vec![vocab.reserved().assistant];
        tail.extend(vocab.encode(&format!(" {}", task.target_output())));

        let candidate_ok: Vec<bool> = (0..vocab.size() as TokenId)
            .map(|id| filter.is_allowed(id) && retokenization_stable(&vocab, id))
            .collect();
        let candidate_tail_ok: Vec<bool> = (0..vocab.size() as TokenId)
            .map(|id| {
                filter.is_allowed(id) && {
                    let b = vocab.token_bytes(id);
                    b.len() == 1 && b[0].is_ascii_digit()
                }
            })
            .collect();

        let mut states = Vec::with_capacity(models.len());
        for (id, model) in models {
            let mut cache = model.new_cache();
            let rows = model.forward_cached(&mut cache, &prefix, 0)?;
            let mut prefix_nll = 0.0f64;
            for (row, &next) in rows.iter().zip(prefix[1..].iter()) {
                prefix_nll += log_sum_exp_row(row) - row[next as usize] as f64;
            }
            let boundary_row = rows.last().expect("non-empty prefix").clone();
            states.push(ModelState { id, model, prompt_cache: cache, boundary_row, prefix_nll });
        }
        Ok(TrapObjective {
            states,
            vocab,
            task,
            alpha,
            prefix,
            tail,
            candidate_ok,
            candidate_tail_ok,
        })
    }

    /// Whether a token may occupy the given suffix slot.
    pub fn candidate_ok_at(&self, pos: usize, id: TokenId) -> bool {
        self.candidate_ok[id as usize] || (pos > 0 && self.candidate_tail_ok[id as usize])
    }

    pub fn task(&self) -> &TrapTask {
        &self.task
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.states.iter().map(|s| s.id.clone()).collect()
    }

    pub fn candidate_token_ids(&self) -> Vec<TokenId> {
        self.candidate_ok
            .iter()
            .enumerate()
            .filter_map(|(id, &ok)| ok.then_some(id as TokenId))
            .collect()
    }

    /// Deterministic neutral filler used to initialize every suffix slot.
    pub fn filler_token(&self) -> Result<TokenId, GcgError> {
        for pref in [" !", " ?", " ~", " and"] {
            let ids = self.vocab.encode(pref);
            if ids.len() == 1 && self.candidate_ok[ids[0] as usize] {
                return Ok(ids[0]);
            }
        }
        self.candidate_ok
            .iter()
            .position(|&ok| ok)
            .map(|id| id as TokenId)
            .ok_or(GcgError::EmptyCandidatePool)
    }

    /// Mean over the ensemble of (1-alpha)*ce(target) + alpha*nll(prompt).
    pub fn loss(&self, suffix_ids: &[TokenId]) -> Result<f64, GcgError> {
        let mut total = 0.0f64;
        for state in &self.states {
            total += self.loss_one(state, suffix_ids)?;
        }
        Ok(total / self.states.len() as f64)
    }

    fn loss_one(&self, state: &ModelState, suffix_ids: &[TokenId]) -> Result<f64, GcgError> {
        let p = suffix_ids.len();
        let mut ext: Vec<TokenId> = Vec::with_capacity(p + self.tail.len());
        ext.extend_from_slice(suffix_ids);
        ext.extend_from_slice(&self.tail);
        // rows for fed ext positions logits_from.. ; row i predicts ext[i+1]
        let logits_from = if self.alpha > 0.0 { 0 } else { p };
        let mut cache = state.prompt_cache.clone();
        let rows = state.model.forward_cached(&mut cache, &ext[..ext.len() - 1], logits_from)?;

        // cross-entropy over the target output tokens (after the assistant
        // marker): ext indices p+1 ..= ext.len()-1
        let mut ce_sum = 0.0f64;
        for j in (p + 1)..ext.len() {
            let row = &rows[j - 1 - logits_from];
            ce_sum += log_sum_exp_row(row) - row[ext[j] as usize] as f64;
        }
        let ce_mean = ce_sum / (self.tail.len() - 1) as f64;
        if self.alpha == 0.0 {
            return Ok(ce_mean);
        }

        // prompt likelihood term over positions 1 ..= last suffix slot
        let mut nll = state.prefix_nll;
        nll += log_sum_exp_row(&state.boundary_row) - state.boundary_row[ext[0] as usize] as f64;
        for j in 1..p {
            let row = &rows[j - 1 - logits_from];
            nll += log_sum_exp_row(row) - row[ext[j] as usize] as f64;
        }
        let t = (self.prefix.len() + p - 1) as f64;
        Ok((1.0 - self.alpha) * ce_mean + self.alpha * nll / t)
    }

    /// Gradient of the loss with respect to the suffix one-hot matrix,
    /// averaged over the ensemble. Forbidden token columns are +inf so they
    /// never enter a top-k of most-negative entries.
    pub fn candidate_grad(&self, suffix_ids: &[TokenId]) -> Result<Vec<f64>, GcgError> {
        let p = suffix_ids.len();
        let v = self.vocab.size();
        let onehot = OneHotInput::new(
            (self.prefix.len()..self.prefix.len() + p).collect(),
            &suffix_ids.iter().map(|&i| i as usize).collect::<Vec<_>>(),
            v,
        )?;
        let grads: Vec<Vec<f64>> = self
            .states
            .par_iter()
            .map(|state| self.grad_one(state, &onehot))
            .collect::<Result<_, _>>()?;
        let mut mean = vec![0.0f64; p * v];
        for g in &grads {
            for (m, &x) in mean.iter_mut().zip(g.iter()) {
                *m += x;
            }
        }
        let inv = 1.0 / grads.len() as f64;
        for (i, m) in mean.iter_mut().enumerate() {
            if self.candidate_ok_at(i / v, (i % v) as TokenId) {
                *m *= inv;
            } else {
                *m = f64::INFINITY;
            }
        }
        Ok(mean)
    }

    fn grad_one(&self, state: &ModelState, onehot: &OneHotInput) -> Result<Vec<f64>, GcgError> {
        let p = onehot.positions().len();
        let mut g = Graph::new();
        let (logits, oh_node) =
            state.model.graph_with_onehot(&mut g, &self.prefix, onehot, &self.tail)?;
        let s = self.prefix.len() + p + self.tail.len();

        // target cross-entropy: positions of tail[1..] in the full sequence
        let target_pairs: Vec<(usize, usize)> = (1..self.tail.len())
            .map(|j| (self.prefix.len() + p + j - 1, self.tail[j] as usize))
            .collect();
        debug_assert_eq!(target_pairs.last().unwrap().0, s - 2);
        let ce = g.ce_at_positions(logits, target_pairs)?;

        let loss = if self.alpha == 0.0 {
            ce
        } else {
            // fixed-label prompt positions 1..prefix_len
            let fixed_pairs: Vec<(usize, usize)> =
                (1..self.prefix.len()).map(|i| (i - 1, self.prefix[i] as usize)).collect();
            let n_fixed = fixed_pairs.len() as f64;
            let fixed = g.ce_at_positions(logits, fixed_pairs)?;
            // suffix positions labelled by their own one-hot rows
            let soft_rows: Vec<usize> =
                (0..p).map(|j| self.prefix.len() + j - 1).collect();
            let soft = g.ce_soft_rows(logits, oh_node, soft_rows)?;
            let t = n_fixed + p as f64;
            let fixed_part = g.scale(fixed, n_fixed / t)?;
            let soft_part = g.scale(soft, p as f64 / t)?;
            let nll = g.add(fixed_part, soft_part)?;
            let ce_part = g.scale(ce, 1.0 - self.alpha)?;
            let nll_part = g.scale(nll, self.alpha)?;
            g.add(ce_part, nll_part)?
        };
        g.backward(loss)?;
        Ok(g.grad_f64(oh_node).expect("onehot gradient").to_vec())
    }

    /// Per-position candidate pool: up to `topk` allowed tokens ranked by
    /// most-negative gradient, ties broken by id.
    pub fn top_candidates(&self, grad: &[f64], suffix_len: usize, topk: usize) -> Vec<Vec<TokenId>> {
        let v = self.vocab.size();
        (0..suffix_len)
            .map(|pos| {
                let row = &grad[pos * v..(pos + 1) * v];
                let mut ids: Vec<TokenId> = (0..v as TokenId)
                    .filter(|&id| row[id as usize].is_finite())
                    .collect();
                ids.sort_by(|&a, &b| {
                    row[a as usize]
                        .partial_cmp(&row[b as usize])
                        .expect("finite gradients")
                        .then(a.cmp(&b))
                });
                ids.truncate(topk);
                ids
            })
            .collect()
    }

    /// One optimizer step: rank candidates by gradient, sample a batch of
    /// single-token substitutions, keep the best strict improvement. The
    /// incumbent always participates, so the loss never increases. When the
    /// batch covers the whole pool the step is exhaustive.
    pub fn gcg_step(
        &self,
        suffix_ids: &[TokenId],
        current_loss: f64,
        config: &GcgConfig,
        rng: &mut impl Rng,
    ) -> Result<(Vec<TokenId>, f64), GcgError> {
        let grad = self.candidate_grad(suffix_ids)?;
        let pools = self.top_candidates(&grad, suffix_ids.len(), config.topk);
        let pool_size: usize = pools.iter().map(|p| p.len()).sum();
        if pool_size == 0 {
            return Err(GcgError::EmptyCandidatePool);
        }

        let mut candidates: BTreeSet<(usize, TokenId)> = BTreeSet::new();
        if config.batch >= pool_size {
            for (pos, pool) in pools.iter().enumerate() {
                for &id in pool {
                    if id != suffix_ids[pos] {
                        candidates.insert((pos, id));
                    }
                }
            }
        } else {
            let live: Vec<usize> =
                (0..pools.len()).filter(|&p| !pools[p].is_empty()).collect();
            for _ in 0..config.batch {
                let pos = live[rng.gen_range(0..live.len())];
                let id = pools[pos][rng.gen_range(0..pools[pos].len())];
                if id != suffix_ids[pos] {
                    candidates.insert((pos, id));
                }
            }
        }

        let candidates: Vec<(usize, TokenId)> = candidates.into_iter().collect();
        let losses: Vec<f64> = candidates
            .par_iter()
            .map(|&(pos, id)| {
                let mut cand = suffix_ids.to_vec();
                cand[pos] = id;
                self.loss(&cand)
            })
            .collect::<Result<_, _>>()?;

        let mut best: Option<(f64, usize, TokenId)> = None;
        for (&(pos, id), &l) in candidates.iter().zip(losses.iter()) {
            let key = (l, pos, id);
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
        match best {
            Some((l, pos, id)) if l < current_loss => {
                let mut next = suffix_ids.to_vec();
                next[pos] = id;
                Ok((next, l))
            }
            _ => Ok((suffix_ids.to_vec(), current_loss)),
        }
    }

    /// Full optimization run: T steps of coordinate descent with filtering
    /// applied at every iteration, returning the suffix at the lowest-loss
    /// step together with the whole trace.
    pub fn optimize(&self, config: &GcgConfig) -> Result<SuffixRecord, GcgError> {
        config.validate(self.vocab.size())?;
        let started = std::time::Instant::now();
        let filler = self.filler_token()?;
        let mut suffix = vec![filler; config.suffix_len];
        let mut loss = self.loss(&suffix)?;
        let mut trace = Vec::with_capacity(config.steps + 1);
        trace.push(loss);
        let mut rng = substream(config.seed, "gcg");
        for _ in 0..config.steps {
            let (next, next_loss) = self.gcg_step(&suffix, loss, config, &mut rng)?;
            suffix = next;
            loss = next_loss;
            trace.push(loss);
        }
        let best_loss = trace.iter().cloned().fold(f64::INFINITY, f64::min);
        let best_step = trace
            .iter()
            .position(|&l| l == best_loss)
            .expect("trace contains its minimum");
        debug_assert_eq!(loss, best_loss, "incumbent retention keeps the final suffix best");
        let decoded = self.vocab.decode(&suffix);
        Ok(SuffixRecord {
            task: self.task.clone(),
            config: config.clone(),
            suffix_ids: suffix,
            suffix_text: decoded.strip_prefix(' ').unwrap_or(&decoded).to_string(),
            loss_trace: trace,
            best_step,
            best_loss,
            model_ids: self.model_ids(),
            seed: config.seed,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// A suffix candidate must re-tokenize to itself when the decoded suffix is
/// pasted after the base prompt. Tokens carrying exactly one leading
/// separator space are whole word-chunks, which the greedy segmenter always
/// reproduces.
fn retokenization_stable(vocab: &Vocab, id: TokenId) -> bool {
    let bytes = vocab.token_bytes(id);
    bytes.len() >= 2
        && bytes[0] == b' '
        && bytes[1] != b' '
        && !bytes[1..].iter().any(|&b| b == b' ' || b == b'\n')
}

/// Exhaustive best single-token substitution; the selection oracle for
/// `gcg_step`. Lives here for reuse by the acceptance suite; it shares the
/// loss function but bypasses gradients, pools and sampling entirely.
pub fn brute_force_step(
    objective: &TrapObjective,
    suffix_ids: &[TokenId],
    current_loss: f64,
) -> Result<(Vec<TokenId>, f64), GcgError> {
    let vocab_size = objective.vocab.size() as TokenId;
    let mut best: Option<(f64, usize, TokenId)> = None;
    for pos in 0..suffix_ids.len() {
        for id in 0..vocab_size {
            if id == suffix_ids[pos] || !objective.candidate_ok_at(pos, id) {
                continue;
            }
            let mut cand = suffix_ids.to_vec();
            cand[pos] = id;
            let l = objective.loss(&cand)?;
            let key = (l, pos, id);
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
    }
    match best {
        Some((l, pos, id)) if l < current_loss => {
            let mut next = suffix_ids.to_vec();
            next[pos] = id;
            Ok((next, l))
        }
        _ => Ok((suffix_ids.to_vec(), current_loss)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream as sub;
    use crate::tokenizer::{build_filter, FilterLexicon};
    use crate::zoo::LmConfig;

    fn test_vocab() -> Arc<Vocab> {
        let corpus = [
            "Write a random string composed of 3 digits. Your reply should only contain the random string.",
            "Sure, here is a random string of 3 digits: 314",
            "You are a helpful assistant. the quick brown fox jumps over the lazy dog",
            "words and stones and rivers and keep and going and such and more and here",
            "the and fox and dog and words keep going more here such over quick brown",
        ];
        Arc::new(Vocab::train(&corpus, 72))
    }

    fn test_model(vocab: &Vocab, seed: u64, d_model: usize) -> Arc<LmModel> {
        let config = LmConfig {
            vocab_size: vocab.size(),
            d_model,
            n_layers: 1,
            n_heads: 2,
            context_len: 128,
            seed,
        };
        Arc::new(LmModel::init(config, &mut sub(seed, "init")).unwrap())
    }

    fn objective(vocab: &Arc<Vocab>, seeds: &[u64], mode: FilterMode, alpha: f64) -> TrapObjective {
        let models: Vec<(String, Arc<LmModel>)> = seeds
            .iter()
            .map(|&s| (format!("m{s}"), test_model(vocab, s, 16)))
            .collect();
        let filter = build_filter(vocab, FilterLexicon::shipped(), mode);
        let task = TrapTask::new(3, "314").unwrap();
        TrapObjective::new(
            models,
            vocab.clone(),
            &ChatTemplate::default(),
            task,
            &filter,
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let vocab = test_vocab();
        let obj = objective(&vocab, &[1], FilterMode::Full, 0.0);
        let filler = obj.filler_token().unwrap();
        let loss = obj.loss(&vec![filler; 4]).unwrap();
        let bound = (vocab.size() as f64).ln();
        assert!((loss - bound).abs() / bound < 0.05, "loss {loss} vs ln(V) {bound}");
    }

    #[test]
    fn ensemble_of_identical_models_equals_single() {
        let vocab = test_vocab();
        let single = objective(&vocab, &[4], FilterMode::Full, 0.0);
        let models = vec![
            ("a".to_string(), test_model(&vocab, 4, 16)),
            ("b".to_string(), test_model(&vocab, 4, 16)),
        ];
        let filter = build_filter(&vocab, FilterLexicon::shipped(), FilterMode::Full);
        let pair = TrapObjective::new(
            models,
            vocab.clone(),
            &ChatTemplate::default(),
            TrapTask::new(3, "314").unwrap(),
            &filter,
            0.0,
        )
        .unwrap();
        let filler = single.filler_token().unwrap();
        let s = vec![filler; 3];
        assert_eq!(single.loss(&s).unwrap(), pair.loss(&s).unwrap());
    }

    #[test]
    fn grad_matrix_shape_and_digit_mask() {
        let vocab = test_vocab();
        let obj = objective(&vocab, &[2], FilterMode::Full, 0.0);
        let filler = obj.filler_token().unwrap();
        let suffix = vec![filler; 3];
        let grad = obj.candidate_grad(&suffix).unwrap();
        assert_eq!(grad.len(), 3 * vocab.size());
        for id in 0..vocab.size() as TokenId {
            if vocab.token_has_digit(id) {
                for pos in 0..3 {
                    assert!(grad[pos * vocab.size() + id as usize].is_infinite());
                }
            }
        }
    }

    #[test]
    fn loss_is_finite_with_alpha() {
        let vocab = test_vocab();
        let obj = objective(&vocab, &[3], FilterMode::Full, 0.3);
        let filler = obj.filler_token().unwrap();
        let suffix = vec![filler; 3];
        let l = obj.loss(&suffix).unwrap();
        assert!(l.is_finite());
        let g = obj.candidate_grad(&suffix).unwrap();
        assert!(g.iter().any(|v| v.is_finite()));
        // alpha=0 differs from alpha>0
        let plain = objective(&vocab, &[3], FilterMode::Full, 0.0);
        assert_ne!(plain.loss(&suffix).unwrap(), l);
    }

    #[test]
    fn gradient_signs_agree_with_substitution_deltas() {
        // steepest allowed coordinates of the one-hot gradient should
        // predict the sign of the exact loss change
        let vocab = test_vocab();
        let obj = objective(&vocab, &[7], FilterMode::Full, 0.0);
        let filler = obj.filler_token().unwrap();
        let suffix = vec![filler];
        let base = obj.loss(&suffix).unwrap();
        let grad = obj.candidate_grad(&suffix).unwrap();
        let mut coords: Vec<(f64, TokenId)> = obj
            .candidate_token_ids()
            .into_iter()
            .filter(|&id| id != filler)
            .map(|id| (grad[id as usize], id))
            .collect();
        coords.sort_by(|a, b| b.0.abs().partial_cmp(&a.0.abs()).unwrap());
        coords.truncate(10);
        let mut agree = 0;
        for &(g, id) in &coords {
            let delta = obj.loss(&[id]).unwrap() - base;
            if delta.signum() == g.signum() || delta.abs() < 1e-9 {
                agree += 1;
            }
        }
        assert!(agree >= 9, "only {agree}/10 sign agreements");
    }

    #[test]
    fn exhaustive_step_matches_brute_force() {
        let vocab = test_vocab();
        let obj = objective(&vocab, &[5], FilterMode::Full, 0.0);
        let filler = obj.filler_token().unwrap();
        let suffix = vec![filler; 2];
        let loss = obj.loss(&suffix).unwrap();
        let allowed = obj.candidate_token_ids().len();
        let config = GcgConfig {
            steps: 1,
            suffix_len: 2,
            topk: allowed,
            batch: usize::MAX,
            filter_mode: FilterMode::Full,
            ascii_only: true,
            alpha: 0.0,
            seed: 0,
        };
        let mut rng = sub(0, "step");
        let (fast, fast_loss) = obj.gcg_step(&suffix, loss, &config, &mut rng).unwrap();
        let (brute, brute_loss) = brute_force_step(&obj, &suffix, loss).unwrap();
        assert_eq!(fast, brute);
        assert_eq!(fast_loss, brute_loss);
    }

    #[test]
    fn steps_are_deterministic_and_monotone() {
        let vocab = test_vocab();
        let obj = objective(&vocab, &[6], FilterMode::Full, 0.0);
        let config = GcgConfig {
            steps: 4,
            suffix_len: 3,
            topk: 16,
            batch: 24,
            filter_mode: FilterMode::Full,
            ascii_only: true,
            alpha: 0.0,
            seed: 11,
        };
        let a = obj.optimize(&config).unwrap();
        let b = obj.optimize(&config).unwrap();
        assert_eq!(a.suffix_ids, b.suffix_ids);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.loss_trace.len(), config.steps + 1);
        for w in a.loss_trace.windows(2) {
            assert!(w[1] <= w[0], "trace must be non-increasing: {:?}", a.loss_trace);
        }
        assert_eq!(a.best_loss, *a.loss_trace.last().unwrap());
    }

    #[test]
    fn ensemble_order_does_not_matter() {
        let vocab = test_vocab();
        let filter = build_filter(&vocab, FilterLexicon::shipped(), FilterMode::Full);
        let task = TrapTask::new(3, "271").unwrap();
        let build = |seeds: [u64; 2]| {
            let models: Vec<(String, Arc<LmModel>)> = seeds
                .iter()
                .map(|&s| (format!("m{s}"), test_model(&vocab, s, 16)))
                .collect();
            TrapObjective::new(
                models,
                vocab.clone(),
                &ChatTemplate::default(),
                task.clone(),
                &filter,
                0.0,
            )
            .unwrap()
        };
        let config = GcgConfig {
            steps: 3,
            suffix_len: 2,
            topk: 12,
            batch: 16,
            filter_mode: FilterMode::Full,
            ascii_only: true,
            alpha: 0.0,
            seed: 2,
        };
        let ab = build([8, 9]).optimize(&config).unwrap();
        let ba = build([9, 8]).optimize(&config).unwrap();
        assert_eq!(ab.suffix_ids, ba.suffix_ids);
        assert_eq!(ab.loss_trace, ba.loss_trace);
    }

    #[test]
    fn full_filter_suffix_is_sound() {
        let vocab = test_vocab();
        let obj = objective(&vocab, &[10], FilterMode::Full, 0.0);
        let config = GcgConfig {
            steps: 3,
            suffix_len: 4,
            topk: 16,
            batch: 16,
            filter_mode: FilterMode::Full,
            ascii_only: true,
            alpha: 0.0,
            seed: 3,
        };
        let rec = obj.optimize(&config).unwrap();
        assert!(!rec.suffix_text.contains(|c: char| c.is_ascii_digit()));
        assert!(!rec.suffix_text.contains(&rec.task.target));
        // decoded suffix re-tokenizes to the same ids after the base prompt
        let full = format!("{} {}", rec.task.prompt, rec.suffix_text);
        let re = vocab.encode(&format!(" {full}"));
        let tail: Vec<TokenId> = re[re.len() - rec.suffix_ids.len()..].to_vec();
        assert_eq!(tail, rec.suffix_ids);
    }

    #[test]
    fn record_round_trips_through_file() {
        let vocab = test_vocab();
        let obj = objective(&vocab, &[12], FilterMode::Full, 0.0);
        let config = GcgConfig {
            steps: 1,
            suffix_len: 2,
            topk: 8,
            batch: 8,
            filter_mode: FilterMode::Full,
            ascii_only: true,
            alpha: 0.0,
            seed: 4,
        };
        let rec = obj.optimize(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        rec.save(&p).unwrap();
        let loaded = SuffixRecord::load(&p).unwrap();
        assert_eq!(loaded.suffix_ids, rec.suffix_ids);
        assert_eq!(loaded.loss_trace, rec.loss_trace);
        assert_eq!(loaded.task, rec.task);
    }

    #[test]
    fn empty_pool_is_structured_error() {
        // corpus of digits only: every stable merge token carries a digit,
        // so the full filter empties the candidate pool
        let vocab = Arc::new(Vocab::train(
            &[" 111 222 333 111 222 333 111 222 333 111 222 333"],
            24,
        ));
        let model = test_model(&vocab, 1, 8);
        let filter = build_filter(&vocab, FilterLexicon::shipped(), FilterMode::Full);
        let obj = TrapObjective::new(
            vec![("m".into(), model)],
            vocab.clone(),
            &ChatTemplate::default(),
            TrapTask::new(3, "111").unwrap(),
            &filter,
            0.0,
        )
        .unwrap();
        assert!(matches!(obj.filler_token(), Err(GcgError::EmptyCandidatePool)));
    }
}
