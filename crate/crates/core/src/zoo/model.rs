use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Graph, NnError, NodeId, OneHotInput, Tensor};
use crate::tokenizer::TokenId;

use super::ZooError;

/// Architecture and identity of one zoo model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), ZooError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ZooError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.context_len == 0 {
            return Err(ZooError::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

/// Decoder-only transformer with pre-layernorm blocks, GELU feed-forward and
/// a weight-tied output head. Weights are immutable after training; frozen
/// models are safe to share across threads.
pub struct LmModel {
    config: LmConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: std::collections::HashMap<String, usize>,
}

impl std::fmt::Debug for LmModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LmModel").field("config", &self.config).finish_non_exhaustive()
    }
}

struct LayerIdx {
    ln1g: usize,
    ln1b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2g: usize,
    ln2b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Canonical parameter list for a config: (name, shape).
pub fn param_spec(config: &LmConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, c) = (config.vocab_size, config.d_model, config.context_len);
    let mut spec = vec![
        ("wte".to_string(), vec![v, d]),
        ("wpe".to_string(), vec![c, d]),
    ];
    for l in 0..config.n_layers {
        for (suffix, shape) in [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("wq", vec![d, d]),
            ("bq", vec![d]),
            ("wk", vec![d, d]),
            ("bk", vec![d]),
            ("wv", vec![d, d]),
            ("bv", vec![d]),
            ("wo", vec![d, d]),
            ("bo", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("w1", vec![d, 4 * d]),
            ("b1", vec![4 * d]),
            ("w2", vec![4 * d, d]),
            ("b2", vec![d]),
        ] {
            spec.push((format!("l{l}.{suffix}"), shape));
        }
    }
    spec.push(("lnf.g".to_string(), vec![d]));
    spec.push(("lnf.b".to_string(), vec![d]));
    spec
}

impl LmModel {
    /// Fresh model with small Gaussian init; output projections start at
    /// zero and layernorm gains at one.
    pub fn init(config: LmConfig, rng: &mut impl Rng) -> Result<LmModel, ZooError> {
        config.validate()?;
        let spec = param_spec(&config);
        let mut names = Vec::with_capacity(spec.len());
        let mut tensors = Vec::with_capacity(spec.len());
        for (name, shape) in spec {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with("ln1.g")
                || name.ends_with("ln2.g")
                || name.ends_with("lnf.g")
            {
                vec![1.0; numel]
            } else if name.ends_with(".b")
                || name.ends_with("bq")
                || name.ends_with("bk")
                || name.ends_with("bv")
                || name.ends_with("bo")
                || name.ends_with("b1")
                || name.ends_with("b2")
                || name.ends_with("wo")
                || name.ends_with("w2")
            {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| gauss(rng) * 0.02).collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data).expect("spec shapes are consistent"));
        }
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(LmModel { config, names, tensors, index })
    }

    pub fn from_tensors(
        config: LmConfig,
        mut named: std::collections::HashMap<String, Tensor>,
    ) -> Result<LmModel, ZooError> {
        config.validate()?;
        let spec = param_spec(&config);
        let mut names = Vec::with_capacity(spec.len());
        let mut tensors = Vec::with_capacity(spec.len());
        for (name, shape) in spec {
            let t = named
                .remove(&name)
                .ok_or_else(|| ZooError::Weights(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ZooError::Weights(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(ZooError::Weights(format!("unexpected tensor {extra}")));
        }
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(LmModel { config, names, tensors, index })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Sum of squared differences across all parameters.
    pub fn weight_distance(&self, other: &LmModel) -> f64 {
        self.tensors
            .iter()
            .zip(other.tensors.iter())
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    fn layer_idx(&self, l: usize) -> LayerIdx {
        let ix = |s: &str| self.index[&format!("l{l}.{s}")];
        LayerIdx {
            ln1g: ix("ln1.g"),
            ln1b: ix("ln1.b"),
            wq: ix("wq"),
            bq: ix("bq"),
            wk: ix("wk"),
            bk: ix("bk"),
            wv: ix("wv"),
            bv: ix("bv"),
            wo: ix("wo"),
            bo: ix("bo"),
            ln2g: ix("ln2.g"),
            ln2b: ix("ln2.b"),
            w1: ix("w1"),
            b1: ix("b1"),
            w2: ix("w2"),
            b2: ix("b2"),
        }
    }

    // ── differentiable graph construction ──────────────────────────────

    /// Builds the forward graph for a plain token sequence and returns the
    /// logits node ([seq, vocab]). All parameters are bound as named inputs.
    pub fn graph_for_ids(&self, g: &mut Graph, ids: &[TokenId]) -> Result<NodeId, NnError> {
        let nodes = self.bind_params(g)?;
        let wte = nodes[self.index["wte"]];
        let tok = g.embed_rows(wte, ids.iter().map(|&i| i as usize).collect())?;
        self.graph_body(g, &nodes, tok, ids.len())
    }

    /// Builds the forward graph where a block of suffix slots is driven by a
    /// differentiable one-hot matrix. Returns (logits, onehot node).
    pub fn graph_with_onehot(
        &self,
        g: &mut Graph,
        prefix: &[TokenId],
        onehot: &OneHotInput,
        tail: &[TokenId],
    ) -> Result<(NodeId, NodeId), NnError> {
        let p = onehot.positions();
        for (slot, &pos) in p.iter().enumerate() {
            if pos != prefix.len() + slot {
                return Err(NnError::ShapeMismatch {
                    op: "one_hot",
                    detail: format!("slot {slot} at position {pos}, expected {}", prefix.len() + slot),
                });
            }
        }
        let nodes = self.bind_params(g)?;
        let wte = nodes[self.index["wte"]];
        let oh = g.input("onehot", onehot.matrix().clone())?;
        let pe = g.embed_rows(wte, prefix.iter().map(|&i| i as usize).collect())?;
        let se = g.matmul(oh, wte)?;
        let te = g.embed_rows(wte, tail.iter().map(|&i| i as usize).collect())?;
        let cat = g.row_concat(vec![pe, se, te])?;
        let s = prefix.len() + p.len() + tail.len();
        let logits = self.graph_body(g, &nodes, cat, s)?;
        Ok((logits, oh))
    }

    fn bind_params(&self, g: &mut Graph) -> Result<Vec<NodeId>, NnError> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .map(|(n, t)| g.input(n, t.clone()))
            .collect()
    }

    fn graph_body(
        &self,
        g: &mut Graph,
        nodes: &[NodeId],
        tok: NodeId,
        s: usize,
    ) -> Result<NodeId, NnError> {
        let wpe = nodes[self.index["wpe"]];
        let pos = g.slice_rows(wpe, 0, s)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..self.config.n_layers {
            let ix = self.layer_idx(l);
            let a = g.layer_norm(x, nodes[ix.ln1g], nodes[ix.ln1b])?;
            let q = g.matmul(a, nodes[ix.wq])?;
            let q = g.add_row_bias(q, nodes[ix.bq])?;
            let k = g.matmul(a, nodes[ix.wk])?;
            let k = g.add_row_bias(k, nodes[ix.bk])?;
            let v = g.matmul(a, nodes[ix.wv])?;
            let v = g.add_row_bias(v, nodes[ix.bv])?;
            let att = g.causal_self_attention(q, k, v, self.config.n_heads)?;
            let o = g.matmul(att, nodes[ix.wo])?;
            let o = g.add_row_bias(o, nodes[ix.bo])?;
            x = g.add(x, o)?;
            let f = g.layer_norm(x, nodes[ix.ln2g], nodes[ix.ln2b])?;
            let h = g.matmul(f, nodes[ix.w1])?;
            let h = g.add_row_bias(h, nodes[ix.b1])?;
            let h = g.gelu(h)?;
            let m = g.matmul(h, nodes[ix.w2])?;
            let m = g.add_row_bias(m, nodes[ix.b2])?;
            x = g.add(x, m)?;
        }
        let xf = g.layer_norm(x, nodes[self.index["lnf.g"]], nodes[self.index["lnf.b"]])?;
        g.matmul_bt(xf, nodes[self.index["wte"]])
    }

    // ── fast inference path (no gradients) ──────────────────────────────

    pub fn new_cache(&self) -> KvCache {
        KvCache {
            k: vec![Vec::new(); self.config.n_layers],
            v: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }

    /// Feeds `ids` through the model extending `cache`, returning logits
    /// rows for fed positions with index >= `logits_from` (relative to
    /// `ids`). Row order matches the fed order.
    pub fn forward_cached(
        &self,
        cache: &mut KvCache,
        ids: &[TokenId],
        logits_from: usize,
    ) -> Result<Vec<Vec<f32>>, ZooError> {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        if cache.len + ids.len() > self.config.context_len {
            return Err(ZooError::ContextOverflow {
                need: cache.len + ids.len(),
                have: self.config.context_len,
            });
        }
        let wte = self.param("wte");
        let wpe = self.param("wpe");
        let mut out = Vec::new();
        for (i, &id) in ids.iter().enumerate() {
            let pos = cache.len;
            let mut x: Vec<f32> = wte
                .row(id as usize)
                .iter()
                .zip(wpe.row(pos))
                .map(|(a, b)| a + b)
                .collect();
            for l in 0..self.config.n_layers {
                let ix = self.layer_idx(l);
                let a = layernorm_row(&x, self.tensors[ix.ln1g].data(), self.tensors[ix.ln1b].data());
                let q = linear_row(&a, &self.tensors[ix.wq], self.tensors[ix.bq].data());
                let kq = linear_row(&a, &self.tensors[ix.wk], self.tensors[ix.bk].data());
                let vq = linear_row(&a, &self.tensors[ix.wv], self.tensors[ix.bv].data());
                cache.k[l].extend_from_slice(&kq);
                cache.v[l].extend_from_slice(&vq);
                let n_ctx = pos + 1;
                let mut att = vec![0.0f32; d];
                for head in 0..h {
                    let off = head * dh;
                    let mut scores = vec![0.0f64; n_ctx];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let krow = &cache.k[l][j * d + off..j * d + off + dh];
                        let mut acc = 0.0f64;
                        for (qx, kx) in q[off..off + dh].iter().zip(krow) {
                            acc += *qx as f64 * *kx as f64;
                        }
                        *sc = acc * scale;
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0f64;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        denom += *sc;
                    }
                    for (j, sc) in scores.iter().enumerate() {
                        let p = sc / denom;
                        let vrow = &cache.v[l][j * d + off..j * d + off + dh];
                        for (a2, &vv) in att[off..off + dh].iter_mut().zip(vrow) {
                            *a2 += (p * vv as f64) as f32;
                        }
                    }
                }
                let o = linear_row(&att, &self.tensors[ix.wo], self.tensors[ix.bo].data());
                for (xv, ov) in x.iter_mut().zip(o.iter()) {
                    *xv += ov;
                }
                let f = layernorm_row(&x, self.tensors[ix.ln2g].data(), self.tensors[ix.ln2b].data());
                let mut hh = linear_row(&f, &self.tensors[ix.w1], self.tensors[ix.b1].data());
                for v2 in hh.iter_mut() {
                    *v2 = gelu32(*v2);
                }
                let m = linear_row(&hh, &self.tensors[ix.w2], self.tensors[ix.b2].data());
                for (xv, mv) in x.iter_mut().zip(m.iter()) {
                    *xv += mv;
                }
            }
            cache.len += 1;
            if i >= logits_from {
                let xf = layernorm_row(&x, self.param("lnf.g").data(), self.param("lnf.b").data());
                let mut logits = vec![0.0f32; self.config.vocab_size];
                for (v2, lg) in logits.iter_mut().enumerate() {
                    let wrow = wte.row(v2);
                    let mut acc = 0.0f64;
                    for (a2, b2) in xf.iter().zip(wrow) {
                        acc += *a2 as f64 * *b2 as f64;
                    }
                    *lg = acc as f32;
                }
                if logits.iter().any(|v2| !v2.is_finite()) {
                    return Err(ZooError::NonFiniteLogits { position: pos });
                }
                out.push(logits);
            }
        }
        Ok(out)
    }

    /// Teacher-forced log-probabilities: log p(x_i | x_<i) for i >= 1.
    pub fn logprobs(&self, ids: &[TokenId]) -> Result<Vec<f64>, ZooError> {
        if ids.len() < 2 {
            return Err(ZooError::SequenceTooShort(ids.len()));
        }
        let mut cache = self.new_cache();
        let rows = self.forward_cached(&mut cache, &ids[..ids.len() - 1], 0)?;
        Ok(rows
            .iter()
            .zip(ids[1..].iter())
            .map(|(row, &next)| {
                let lse = crate::nn::log_sum_exp_row(row);
                row[next as usize] as f64 - lse
            })
            .collect())
    }

    /// Mean cross-entropy of positions `score_from..` under teacher forcing
    /// (predicting ids[i] from the prefix). `score_from` must be >= 1.
    pub fn sequence_ce(&self, ids: &[TokenId], score_from: usize) -> Result<f64, ZooError> {
        assert!(score_from >= 1 && score_from < ids.len());
        let mut cache = self.new_cache();
        self.extend_ce(&mut cache, ids, score_from)
    }

    /// As `sequence_ce` but continuing from a pre-filled prefix cache;
    /// `ids` are the remaining tokens and `score_from` indexes into the
    /// whole sequence (cache.len() + extension).
    pub fn extend_ce(
        &self,
        cache: &mut KvCache,
        ids: &[TokenId],
        score_from: usize,
    ) -> Result<f64, ZooError> {
        let base = cache.len;
        assert!(score_from > base && score_from <= base + ids.len());
        // logits rows for absolute positions score_from-1 .. base+len-2
        let logits_from = score_from - 1 - base;
        let rows = self.forward_cached(cache, &ids[..ids.len() - 1], logits_from)?;
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (row, &next) in rows.iter().zip(ids[logits_from + 1..].iter()) {
            let lse = crate::nn::log_sum_exp_row(row);
            total += lse - row[next as usize] as f64;
            count += 1;
        }
        Ok(total / count as f64)
    }
}

/// Per-layer key/value cache for incremental decoding. Cloning a prefix
/// cache is the cheap way to evaluate many continuations of one prompt.
#[derive(Clone)]
pub struct KvCache {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn gauss(rng: &mut impl Rng) -> f32 {
    // Box-Muller from two uniform draws
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

fn layernorm_row(x: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let d = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta.iter()))
        .map(|(&v, (&g, &b))| (((v as f64 - mean) * inv_std) * g as f64 + b as f64) as f32)
        .collect()
}

/// y = x @ W + b for a single row x, W stored [in, out].
fn linear_row(x: &[f32], w: &Tensor, b: &[f32]) -> Vec<f32> {
    let (n_in, n_out) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), n_in);
    let mut acc = vec![0.0f64; n_out];
    for (k, &xv) in x.iter().enumerate() {
        let wrow = w.row(k);
        let xv = xv as f64;
        for (a, &wv) in acc.iter_mut().zip(wrow) {
            *a += xv * wv as f64;
        }
    }
    acc.iter().zip(b.iter()).map(|(&a, &bv)| (a + bv as f64) as f32).collect()
}

fn gelu32(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tiny_config() -> LmConfig {
        LmConfig { vocab_size: 24, d_model: 16, n_layers: 2, n_heads: 2, context_len: 32, seed: 5 }
    }

    fn tiny_model() -> LmModel {
        LmModel::init(tiny_config(), &mut substream(5, "init")).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn graph_and_cached_logits_agree() {
        let m = tiny_model();
        let ids: Vec<TokenId> = vec![3, 9, 1, 17, 4, 22, 7];
        let mut g = Graph::new();
        let logits = m.graph_for_ids(&mut g, &ids).unwrap();
        let graph_rows = g.value(logits).clone();

        let mut cache = m.new_cache();
        let fast_rows = m.forward_cached(&mut cache, &ids, 0).unwrap();
        assert_eq!(fast_rows.len(), ids.len());
        for (i, row) in fast_rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let gv = graph_rows.row(i)[j];
                assert!(
                    (v - gv).abs() <= 1e-4 * gv.abs().max(1.0),
                    "logits[{i}][{j}]: fast {v} vs graph {gv}"
                );
            }
        }
    }

    #[test]
    fn incremental_cache_matches_full_pass() {
        let m = tiny_model();
        let ids: Vec<TokenId> = vec![2, 11, 5, 19, 8, 3];
        let mut full = m.new_cache();
        let all = m.forward_cached(&mut full, &ids, 0).unwrap();

        let mut inc = m.new_cache();
        let first = m.forward_cached(&mut inc, &ids[..3], 0).unwrap();
        let rest = m.forward_cached(&mut inc, &ids[3..], 0).unwrap();
        for (a, b) in all.iter().zip(first.iter().chain(rest.iter())) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn logprobs_match_sequence_ce() {
        let m = tiny_model();
        let ids: Vec<TokenId> = vec![1, 4, 9, 16, 23, 2, 12];
        let lp = m.logprobs(&ids).unwrap();
        assert_eq!(lp.len(), ids.len() - 1);
        let ce = m.sequence_ce(&ids, 1).unwrap();
        let mean_nll = -lp.iter().sum::<f64>() / lp.len() as f64;
        assert!((ce - mean_nll).abs() < 1e-9, "{ce} vs {mean_nll}");
    }

    #[test]
    fn untrained_loss_near_uniform_bound() {
        let m = tiny_model();
        let ids: Vec<TokenId> = (0..20).map(|i| (i * 7 + 3) as TokenId % 24).collect();
        let ce = m.sequence_ce(&ids, 1).unwrap();
        let bound = (24.0f64).ln();
        assert!((ce - bound).abs() / bound < 0.05, "ce {ce} vs ln(V) {bound}");
    }

    #[test]
    fn context_overflow_is_error() {
        let m = tiny_model();
        let ids: Vec<TokenId> = vec![1; 33];
        let mut cache = m.new_cache();
        assert!(matches!(
            m.forward_cached(&mut cache, &ids, 0),
            Err(ZooError::ContextOverflow { .. })
        ));
    }

    #[test]
    fn onehot_graph_matches_plain_ids() {
        let m = tiny_model();
        let prefix: Vec<TokenId> = vec![2, 7, 13];
        let suffix: Vec<TokenId> = vec![5, 9];
        let tail: Vec<TokenId> = vec![1, 4];
        let onehot = OneHotInput::new(
            vec![3, 4],
            &suffix.iter().map(|&i| i as usize).collect::<Vec<_>>(),
            24,
        )
        .unwrap();
        let mut g1 = Graph::new();
        let (l1, _) = m.graph_with_onehot(&mut g1, &prefix, &onehot, &tail).unwrap();
        let all: Vec<TokenId> =
            prefix.iter().chain(suffix.iter()).chain(tail.iter()).copied().collect();
        let mut g2 = Graph::new();
        let l2 = m.graph_for_ids(&mut g2, &all).unwrap();
        let (a, b) = (g1.value(l1), g2.value(l2));
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = LmModel::init(tiny_config(), &mut substream(5, "init")).unwrap();
        let b = LmModel::init(tiny_config(), &mut substream(5, "init")).unwrap();
        assert_eq!(a.weight_distance(&b), 0.0);
    }
}
