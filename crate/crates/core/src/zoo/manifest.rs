use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LmConfig, ZooError};

/// Role a model plays in verification experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZooRole {
    Reference,
    Sibling,
    Confuser,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Neural {
        config: LmConfig,
        corpus: String,
        seed: u64,
        weights: String,
        val_loss: f64,
        /// Trained models must come in under this bound (recorded at build).
        val_loss_bound: f64,
    },
    RuleBased {
        answer_cycle: String,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub role: ZooRole,
    #[serde(flatten)]
    pub kind: ModelKind,
}

/// Index of the trained zoo: one reference plus confusers, with weights
/// paths relative to the manifest location.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooManifest {
    pub version: u32,
    pub vocab: String,
    pub models: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl ZooManifest {
    pub fn validate(&self) -> Result<(), ZooError> {
        if self.version != MANIFEST_VERSION {
            return Err(ZooError::Manifest(format!("unsupported version {}", self.version)));
        }
        let mut seen = HashSet::new();
        for m in &self.models {
            if !seen.insert(m.id.as_str()) {
                return Err(ZooError::Manifest(format!("duplicate model id {:?}", m.id)));
            }
        }
        let references: Vec<&ManifestEntry> =
            self.models.iter().filter(|m| m.role == ZooRole::Reference).collect();
        if references.len() != 1 {
            return Err(ZooError::Manifest(format!(
                "expected exactly one reference model, found {}",
                references.len()
            )));
        }
        let (ref_corpus, ref_config) = match &references[0].kind {
            ModelKind::Neural { corpus, config, .. } => (corpus.clone(), config.clone()),
            ModelKind::RuleBased { .. } => {
                return Err(ZooError::Manifest("reference must be a neural model".into()))
            }
        };
        for m in &self.models {
            if let ModelKind::Neural { config, seed, val_loss, val_loss_bound, .. } = &m.kind {
                if config.seed != *seed {
                    return Err(ZooError::Manifest(format!(
                        "model {:?}: entry seed {} != config seed {}",
                        m.id, seed, config.seed
                    )));
                }
                if val_loss >= val_loss_bound {
                    return Err(ZooError::Manifest(format!(
                        "model {:?}: val loss {} not under bound {}",
                        m.id, val_loss, val_loss_bound
                    )));
                }
            }
            if m.role == ZooRole::Sibling {
                match &m.kind {
                    ModelKind::Neural { config, corpus, .. } => {
                        if corpus != &ref_corpus {
                            return Err(ZooError::Manifest(format!(
                                "sibling {:?} trained on {:?}, reference on {:?}",
                                m.id, corpus, ref_corpus
                            )));
                        }
                        if config.seed == ref_config.seed && config.d_model == ref_config.d_model {
                            return Err(ZooError::Manifest(format!(
                                "sibling {:?} does not differ from the reference in seed or size",
                                m.id
                            )));
                        }
                    }
                    ModelKind::RuleBased { .. } => {
                        return Err(ZooError::Manifest(format!(
                            "sibling {:?} must be a neural model",
                            m.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn reference(&self) -> &ManifestEntry {
        self.models
            .iter()
            .find(|m| m.role == ZooRole::Reference)
            .expect("validated manifest has a reference")
    }

    pub fn save(&self, path: &Path) -> Result<(), ZooError> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ZooManifest, ZooError> {
        let json = std::fs::read_to_string(path)?;
        let manifest: ZooManifest =
            serde_json::from_str(&json).map_err(|e| ZooError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }
}
