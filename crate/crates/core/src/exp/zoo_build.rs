use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::ChatEndpoint;
use crate::rng::substream;
use crate::tokenizer::Vocab;
use crate::zoo::{
    corpus_text, load_model, save_model, synth_corpus, train, ChatTemplate, CorpusStyle,
    GenerationConfig, LmConfig, LmModel, ManifestEntry, ModelKind, RuleBasedResponder,
    TrainConfig, TrainReport, ZooManifest, ZooRole, MANIFEST_VERSION,
};

use super::ExpError;

/// Everything needed to train and persist the desk zoo: one reference, a
/// same-corpus sibling with a different seed, a wider same-corpus sibling,
/// a different-corpus confuser, and the rule-based responder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooBuildConfig {
    pub seed: u64,
    pub merges: usize,
    pub corpus_docs: usize,
    pub d_model: usize,
    pub wide_d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub train: TrainConfig,
    /// Validation loss must come in under this fraction of ln(vocab).
    pub val_bound_frac: f64,
}

impl Default for ZooBuildConfig {
    fn default() -> Self {
        ZooBuildConfig {
            seed: 0,
            merges: 200,
            corpus_docs: 1600,
            d_model: 32,
            wide_d_model: 48,
            n_layers: 2,
            n_heads: 2,
            context_len: 1024,
            train: TrainConfig::default(),
            val_bound_frac: 0.8,
        }
    }
}

impl ZooBuildConfig {
    /// Tiny settings for fast smoke tests of the full pipeline.
    pub fn micro(seed: u64) -> ZooBuildConfig {
        ZooBuildConfig {
            seed,
            merges: 64,
            corpus_docs: 200,
            d_model: 16,
            wide_d_model: 24,
            n_layers: 1,
            n_heads: 2,
            context_len: 256,
            train: TrainConfig { steps: 60, batch: 4, val_docs: 12, ..TrainConfig::default() },
            val_bound_frac: 1.0,
        }
    }
}

pub const REFERENCE_ID: &str = "ref-alpha";
pub const SIBLING_SEED_ID: &str = "sib-seed";
pub const SIBLING_WIDE_ID: &str = "sib-wide";
pub const CONFUSER_BETA_ID: &str = "conf-beta";
pub const RULE_BASED_ID: &str = "rule-fixed";

pub struct ZooBuildOutput {
    pub manifest: ZooManifest,
    pub manifest_path: PathBuf,
    pub reports: HashMap<String, TrainReport>,
    /// Greedy probe continuations on which each sibling pair disagreed.
    pub probe_disagreements: HashMap<(String, String), usize>,
}

struct ModelPlan {
    id: &'static str,
    role: ZooRole,
    style: CorpusStyle,
    d_model: usize,
    seed_name: &'static str,
}

/// Trains and persists the zoo. Deterministic given the config; rebuilding
/// with the same seed produces byte-identical weights and manifest.
pub fn build_zoo(config: &ZooBuildConfig, out_dir: &Path) -> Result<ZooBuildOutput, ExpError> {
    std::fs::create_dir_all(out_dir)?;
    let alpha_docs = synth_corpus(CorpusStyle::Alpha, config.corpus_docs, config.seed);
    let beta_docs = synth_corpus(CorpusStyle::Beta, config.corpus_docs, config.seed);
    let mut text = corpus_text(&alpha_docs);
    text.extend(corpus_text(&beta_docs));
    let refs: Vec<&str> = text.iter().map(|s| s.as_str()).collect();
    let vocab = Vocab::train(&refs, config.merges);
    std::fs::write(out_dir.join("vocab.json"), vocab.to_json())?;

    let plans = [
        ModelPlan {
            id: REFERENCE_ID,
            role: ZooRole::Reference,
            style: CorpusStyle::Alpha,
            d_model: config.d_model,
            seed_name: "model-ref",
        },
        ModelPlan {
            id: SIBLING_SEED_ID,
            role: ZooRole::Sibling,
            style: CorpusStyle::Alpha,
            d_model: config.d_model,
            seed_name: "model-sib-seed",
        },
        ModelPlan {
            id: SIBLING_WIDE_ID,
            role: ZooRole::Sibling,
            style: CorpusStyle::Alpha,
            d_model: config.wide_d_model,
            seed_name: "model-sib-wide",
        },
        ModelPlan {
            id: CONFUSER_BETA_ID,
            role: ZooRole::Confuser,
            style: CorpusStyle::Beta,
            d_model: config.d_model,
            seed_name: "model-conf",
        },
    ];

    let template = ChatTemplate::default();
    let val_bound = config.val_bound_frac * (vocab.size() as f64).ln();
    let trained: Vec<Result<(String, LmConfig, CorpusStyle, LmModel, TrainReport), ExpError>> =
        plans
            .par_iter()
            .map(|plan| {
                let seed: u64 = substream(config.seed, plan.seed_name).gen();
                let lm_config = LmConfig {
                    vocab_size: vocab.size(),
                    d_model: plan.d_model,
                    n_layers: config.n_layers,
                    n_heads: config.n_heads,
                    context_len: config.context_len,
                    seed,
                };
                let docs = match plan.style {
                    CorpusStyle::Alpha => &alpha_docs,
                    CorpusStyle::Beta => &beta_docs,
                };
                let (model, report) = train(&lm_config, &config.train, &vocab, docs, &template)?;
                if report.val_loss >= val_bound {
                    return Err(ExpError::ZooBuild(format!(
                        "model {} validation loss {:.3} not under bound {:.3}",
                        plan.id, report.val_loss, val_bound
                    )));
                }
                Ok((plan.id.to_string(), lm_config, plan.style, model, report))
            })
            .collect();

    let mut entries = Vec::new();
    let mut reports = HashMap::new();
    let mut models: HashMap<String, Arc<LmModel>> = HashMap::new();
    for (plan, result) in plans.iter().zip(trained) {
        let (id, lm_config, style, model, report) = result?;
        let weights_name = format!("{id}.tlm");
        save_model(&model, &out_dir.join(&weights_name))?;
        entries.push(ManifestEntry {
            id: id.clone(),
            role: plan.role,
            kind: ModelKind::Neural {
                config: lm_config.clone(),
                corpus: style.id().to_string(),
                seed: lm_config.seed,
                weights: weights_name,
                val_loss: report.val_loss,
                val_loss_bound: val_bound,
            },
        });
        reports.insert(id.clone(), report);
        models.insert(id, Arc::new(model));
    }
    entries.push(ManifestEntry {
        id: RULE_BASED_ID.to_string(),
        role: ZooRole::Confuser,
        kind: ModelKind::RuleBased { answer_cycle: RuleBasedResponder::default().answer_cycle },
    });

    // the zoo must not be degenerate: same-corpus models have to disagree
    let vocab = Arc::new(vocab);
    let probe_disagreements =
        check_sibling_disagreement(&models, &vocab, &template)?;

    let manifest = ZooManifest {
        version: MANIFEST_VERSION,
        vocab: "vocab.json".into(),
        models: entries,
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(ZooBuildOutput { manifest, manifest_path, reports, probe_disagreements })
}

fn check_sibling_disagreement(
    models: &HashMap<String, Arc<LmModel>>,
    vocab: &Arc<Vocab>,
    template: &ChatTemplate,
) -> Result<HashMap<(String, String), usize>, ExpError> {
    let probes = [
        "Tell me about rivers.",
        "Tell me about mountains.",
        "What can you say about stars and tides?",
        "Write a short fictional story about what follows. forests",
        "Write a random string composed of 3 digits. Your reply should only contain the random string.",
    ];
    let pairs = [
        (REFERENCE_ID, SIBLING_SEED_ID),
        (REFERENCE_ID, SIBLING_WIDE_ID),
        (SIBLING_SEED_ID, SIBLING_WIDE_ID),
    ];
    let gen = GenerationConfig::greedy();
    let mut out = HashMap::new();
    for (a, b) in pairs {
        let ma = &models[a];
        let mb = &models[b];
        if ma.config().d_model == mb.config().d_model && ma.weight_distance(mb) == 0.0 {
            return Err(ExpError::ZooBuild(format!("models {a} and {b} have identical weights")));
        }
        let mut disagreements = 0usize;
        for p in probes {
            let ga = crate::zoo::generate(ma, vocab, template, p, &gen)?;
            let gb = crate::zoo::generate(mb, vocab, template, p, &gen)?;
            if ga != gb {
                disagreements += 1;
            }
        }
        if disagreements == 0 {
            return Err(ExpError::ZooBuild(format!(
                "models {a} and {b} agree on every greedy probe"
            )));
        }
        out.insert((a.to_string(), b.to_string()), disagreements);
    }
    Ok(out)
}

/// A zoo loaded back from disk, ready to hand out chat endpoints and
/// white-box optimization handles.
pub struct LoadedZoo {
    pub dir: PathBuf,
    pub manifest: ZooManifest,
    pub vocab: Arc<Vocab>,
    models: HashMap<String, Arc<LmModel>>,
}

impl LoadedZoo {
    pub fn load(manifest_path: &Path) -> Result<LoadedZoo, ExpError> {
        let manifest = ZooManifest::load(manifest_path)?;
        let dir = manifest_path
            .parent()
            .ok_or_else(|| ExpError::MissingArtifact("manifest has no parent dir".into()))?
            .to_path_buf();
        let vocab_json = std::fs::read_to_string(dir.join(&manifest.vocab))?;
        let vocab = Arc::new(
            Vocab::from_json(&vocab_json).map_err(|e| ExpError::Serde(e.to_string()))?,
        );
        let mut models = HashMap::new();
        for entry in &manifest.models {
            if let ModelKind::Neural { weights, config, .. } = &entry.kind {
                let model = load_model(&dir.join(weights))?;
                if model.config() != config {
                    return Err(ExpError::ZooBuild(format!(
                        "weights config mismatch for {}",
                        entry.id
                    )));
                }
                if config.vocab_size != vocab.size() {
                    return Err(ExpError::ZooBuild(format!(
                        "model {} vocab {} != shared vocab {}",
                        entry.id,
                        config.vocab_size,
                        vocab.size()
                    )));
                }
                models.insert(entry.id.clone(), Arc::new(model));
            }
        }
        Ok(LoadedZoo { dir, manifest, vocab, models })
    }

    pub fn reference_id(&self) -> &str {
        &self.manifest.reference().id
    }

    pub fn roles(&self) -> HashMap<String, ZooRole> {
        self.manifest.models.iter().map(|m| (m.id.clone(), m.role)).collect()
    }

    /// Chat endpoints for every zoo member. Only the reference is
    /// white-box capable; every confuser is black-box-only, which keeps
    /// evaluation honest.
    pub fn endpoints(&self) -> Vec<ChatEndpoint> {
        self.manifest
            .models
            .iter()
            .map(|entry| self.endpoint(&entry.id).expect("manifest ids resolve"))
            .collect()
    }

    pub fn endpoint(&self, id: &str) -> Result<ChatEndpoint, ExpError> {
        let entry = self
            .manifest
            .models
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| ExpError::MissingArtifact(format!("model {id:?} not in manifest")))?;
        Ok(match &entry.kind {
            ModelKind::Neural { .. } => {
                let whitebox = entry.role == ZooRole::Reference;
                ChatEndpoint::local(
                    id,
                    self.models[id].clone(),
                    self.vocab.clone(),
                    ChatTemplate::default(),
                    whitebox,
                )
            }
            ModelKind::RuleBased { answer_cycle } => ChatEndpoint::rule_based(
                id,
                RuleBasedResponder { answer_cycle: answer_cycle.clone() },
                ChatTemplate::default(),
            ),
        })
    }

    /// Direct white-box handles for suffix optimization. The zoo owner has
    /// white-box access to its own weights by definition; black-box
    /// discipline is enforced on the evaluation path via endpoints.
    pub fn optimization_handles(
        &self,
        ids: &[String],
    ) -> Result<Vec<(String, Arc<LmModel>)>, ExpError> {
        ids.iter()
            .map(|id| {
                self.models
                    .get(id)
                    .map(|m| (id.clone(), m.clone()))
                    .ok_or_else(|| {
                        ExpError::MissingArtifact(format!("no neural model {id:?} in zoo"))
                    })
            })
            .collect()
    }

    pub fn neural_model(&self, id: &str) -> Option<Arc<LmModel>> {
        self.models.get(id).cloned()
    }
}
