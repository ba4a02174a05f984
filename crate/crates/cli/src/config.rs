use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use bbiv_core::gcg::GcgConfig;
use bbiv_core::tokenizer::FilterMode;
use bbiv_core::zoo::GenerationConfig;

/// File form of the experiment configuration: a TOML document whose keys
/// mirror the command-line flags. Flags take precedence over the file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub zoo: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub count: Option<usize>,
    pub preset: Option<String>,
    pub filter: Option<String>,
    pub alpha: Option<f64>,
    pub ensemble: Option<Vec<String>>,
    pub trials: Option<usize>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_new_tokens: Option<usize>,
    pub temperatures: Option<Vec<f64>>,
    pub top_ps: Option<Vec<f64>>,
    pub system_prompts: Option<Vec<String>>,
    pub per_suite: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&PathBuf>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {p:?}"))?;
                toml::from_str(&text).with_context(|| format!("parsing config {p:?}"))
            }
        }
    }
}

/// Resolves a GCG preset name plus overrides into a concrete config.
pub fn resolve_gcg(
    preset: &str,
    seed: u64,
    filter: FilterMode,
    alpha: f64,
    steps: Option<usize>,
    batch: Option<usize>,
    topk: Option<usize>,
) -> Result<GcgConfig> {
    let mut config = match preset {
        "paper" => GcgConfig::paper(seed),
        "desk" => GcgConfig::desk(seed),
        other => bail!("unknown preset {other:?} (expected paper or desk)"),
    };
    config.filter_mode = filter;
    config.alpha = alpha;
    if let Some(s) = steps {
        config.steps = s;
    }
    if let Some(b) = batch {
        config.batch = b;
    }
    if let Some(k) = topk {
        config.topk = k;
    }
    Ok(config)
}

pub fn resolve_gen(
    temperature: Option<f64>,
    top_p: Option<f64>,
    max_new_tokens: Option<usize>,
    seed: u64,
) -> GenerationConfig {
    let base = GenerationConfig::default();
    GenerationConfig {
        temperature: temperature.unwrap_or(base.temperature),
        top_p: top_p.unwrap_or(base.top_p),
        max_new_tokens: max_new_tokens.unwrap_or(base.max_new_tokens),
        seed,
    }
}
