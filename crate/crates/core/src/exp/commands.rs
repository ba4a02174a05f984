use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::ChatEndpoint;
use crate::gcg::{GcgConfig, SuffixRecord, TrapObjective, TrapTask};
use crate::ppl::{
    build_suites, roc_from_scores, score_suite, PplSample, RocCurve, SkippedSample,
};
use crate::rng::{substream, substream_indexed};
use crate::tokenizer::{build_filter_with, FilterLexicon};
use crate::verify::{run_trials, TrapRocPoints, TrialOutcome};
use crate::zoo::{ChatTemplate, GenerationConfig};

use super::{ExpError, LoadedZoo};

/// One optimized suffix set: ids are stable, zero-padded and sortable.
pub type SuffixSet = Vec<(String, SuffixRecord)>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizeOpts {
    pub n: usize,
    pub count: usize,
    pub gcg: GcgConfig,
    /// Model ids to optimize on; more than one makes an ensemble suffix.
    pub ensemble: Vec<String>,
    pub seed: u64,
}

/// Runs `count` independent optimizations with per-suffix random targets.
pub fn optimize_suffixes(zoo: &LoadedZoo, opts: &OptimizeOpts) -> Result<SuffixSet, ExpError> {
    let models = zoo.optimization_handles(&opts.ensemble)?;
    let filter = build_filter_with(
        &zoo.vocab,
        FilterLexicon::shipped(),
        opts.gcg.filter_mode,
        opts.gcg.ascii_only,
    );
    let template = ChatTemplate::default();
    let tasks: Vec<(usize, TrapTask)> = (0..opts.count)
        .map(|i| {
            let mut rng = substream_indexed(opts.seed, "targets", i as u64);
            (i, TrapTask::random(opts.n, &mut rng))
        })
        .collect();
    let records: Vec<Result<(String, SuffixRecord), ExpError>> = tasks
        .par_iter()
        .map(|(i, task)| {
            let objective = TrapObjective::new(
                models.clone(),
                zoo.vocab.clone(),
                &template,
                task.clone(),
                &filter,
                opts.gcg.alpha,
            )?;
            let seed: u64 = substream_indexed(opts.seed, "gcg", *i as u64).gen();
            let config = GcgConfig { seed, ..opts.gcg.clone() };
            let record = objective.optimize(&config)?;
            Ok((format!("s{i:03}"), record))
        })
        .collect();
    records.into_iter().collect()
}

/// Evaluates every suffix against every endpoint, `trials` completions
/// each, in a deterministic order.
pub fn verify_suffixes(
    suffixes: &SuffixSet,
    endpoints: &[ChatEndpoint],
    gen: &GenerationConfig,
    trials: usize,
) -> Vec<TrialOutcome> {
    let mut out = Vec::with_capacity(suffixes.len() * endpoints.len() * trials);
    for (suffix_id, record) in suffixes {
        for endpoint in endpoints {
            out.extend(run_trials(record, suffix_id, endpoint, gen, trials));
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemPrompt {
    pub name: String,
    pub text: String,
}

/// The system-prompt set used for the robustness sweep, shipped as data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemPromptSet(pub Vec<SystemPrompt>);

const SHIPPED_SYSTEM_PROMPTS: &str = include_str!("../../data/system_prompts.json");

impl SystemPromptSet {
    pub fn shipped() -> &'static SystemPromptSet {
        static CELL: OnceLock<SystemPromptSet> = OnceLock::new();
        CELL.get_or_init(|| {
            SystemPromptSet(
                serde_json::from_str(SHIPPED_SYSTEM_PROMPTS)
                    .expect("shipped system prompts parse"),
            )
        })
    }

    pub fn load(path: &std::path::Path) -> Result<SystemPromptSet, ExpError> {
        let json = std::fs::read_to_string(path)?;
        Ok(SystemPromptSet(
            serde_json::from_str(&json).map_err(|e| ExpError::Serde(e.to_string()))?,
        ))
    }

    pub fn get(&self, name: &str) -> Option<&SystemPrompt> {
        self.0.iter().find(|p| p.name == name)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub temperatures: Vec<f64>,
    pub top_ps: Vec<f64>,
    pub system_prompts: Vec<String>,
    pub trials: usize,
    pub base: GenerationConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            temperatures: (0..=10).map(|i| i as f64 * 0.2).collect(),
            top_ps: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            system_prompts: SystemPromptSet::shipped()
                .0
                .iter()
                .map(|p| p.name.clone())
                .collect(),
            trials: 10,
            base: GenerationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub tpr: f64,
    pub invalid_rate: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub temperature: Vec<SweepRow>,
    pub top_p: Vec<SweepRow>,
    pub system_prompt: Vec<SweepRow>,
}

fn sweep_cell(
    suffixes: &SuffixSet,
    endpoint: &ChatEndpoint,
    gen: &GenerationConfig,
    system_override: Option<&str>,
    trials: usize,
) -> (f64, f64, usize) {
    let cells: Vec<(usize, usize, usize)> = suffixes
        .par_iter()
        .map(|(suffix_id, record)| {
            let prompt = format!("{} {}", record.task.prompt, record.suffix_text);
            let mut hits = 0usize;
            let mut invalids = 0usize;
            let mut answered = 0usize;
            for trial in 0..trials {
                let stream = format!("sweep:{}:{}", suffix_id, endpoint.id());
                let seed: u64 = substream_indexed(gen.seed, &stream, trial as u64).gen();
                let g = GenerationConfig { seed, ..*gen };
                let result = match system_override {
                    Some(sys) => endpoint.chat_with_system(sys, &prompt, &g),
                    None => endpoint.chat(&prompt, &g),
                };
                if let Ok(text) = result {
                    answered += 1;
                    match crate::verify::parse_answer(&text, record.task.n) {
                        Some(a) if a == record.task.target => hits += 1,
                        Some(_) => {}
                        None => invalids += 1,
                    }
                }
            }
            (hits, invalids, answered)
        })
        .collect();
    let hits: usize = cells.iter().map(|c| c.0).sum();
    let invalids: usize = cells.iter().map(|c| c.1).sum();
    let answered: usize = cells.iter().map(|c| c.2).sum();
    let valid = answered - invalids;
    let tpr = if valid == 0 { 0.0 } else { hits as f64 / valid as f64 };
    let invalid_rate = if answered == 0 { 0.0 } else { invalids as f64 / answered as f64 };
    (tpr, invalid_rate, answered)
}

/// Robustness sweep of fixed suffixes on one endpoint (normally the
/// reference): temperature grid, top-p grid and the system-prompt set.
pub fn sweep(
    suffixes: &SuffixSet,
    endpoint: &ChatEndpoint,
    config: &SweepConfig,
    prompt_set: &SystemPromptSet,
) -> Result<SweepTable, ExpError> {
    let mut temperature = Vec::new();
    for &t in &config.temperatures {
        let gen = GenerationConfig { temperature: t, ..config.base };
        let (tpr, invalid_rate, trials) =
            sweep_cell(suffixes, endpoint, &gen, None, config.trials);
        temperature.push(SweepRow { setting: format!("{t:.1}"), tpr, invalid_rate, trials });
    }
    let mut top_p = Vec::new();
    for &p in &config.top_ps {
        let gen = GenerationConfig { top_p: p, ..config.base };
        let (tpr, invalid_rate, trials) =
            sweep_cell(suffixes, endpoint, &gen, None, config.trials);
        top_p.push(SweepRow { setting: format!("{p:.1}"), tpr, invalid_rate, trials });
    }
    let mut system_prompt = Vec::new();
    for name in &config.system_prompts {
        let sp = prompt_set
            .get(name)
            .ok_or_else(|| ExpError::MissingArtifact(format!("system prompt {name:?}")))?;
        let (tpr, invalid_rate, trials) =
            sweep_cell(suffixes, endpoint, &config.base, Some(&sp.text), config.trials);
        system_prompt.push(SweepRow { setting: name.clone(), tpr, invalid_rate, trials });
    }
    Ok(SweepTable { temperature, top_p, system_prompt })
}

/// Binned perplexity densities for plotting, reference class vs the rest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityExport {
    pub suite: String,
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub bins: usize,
    pub counts: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineOutput {
    pub samples: Vec<PplSample>,
    pub skipped: Vec<SkippedSample>,
    pub curves: BTreeMap<String, RocCurve>,
    pub mean_ppl: BTreeMap<String, BTreeMap<String, f64>>,
    pub densities: Vec<DensityExport>,
}

/// Overlay of discrete operating points and baseline curves, one JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlayData {
    pub baseline: BTreeMap<String, RocCurve>,
    pub trap: Option<TrapRocPoints>,
}

/// Full perplexity-identification baseline over the zoo: generate texts
/// from every endpoint under all three suites, score under the reference,
/// and sweep thresholds into per-suite ROC curves.
pub fn baseline_ppl(
    zoo: &LoadedZoo,
    per_suite: usize,
    gen: &GenerationConfig,
    seed: u64,
) -> Result<BaselineOutput, ExpError> {
    let reference = zoo
        .neural_model(zoo.reference_id())
        .ok_or_else(|| ExpError::MissingArtifact("reference model".into()))?;
    let endpoints = zoo.endpoints();
    let endpoint_refs: Vec<&ChatEndpoint> = endpoints.iter().collect();
    let template = ChatTemplate::default();
    let suites = build_suites(per_suite, seed);

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut curves = BTreeMap::new();
    let mut mean_ppl = BTreeMap::new();
    let mut densities = Vec::new();
    let gen = GenerationConfig { seed: substream(seed, "baseline-gen").gen(), ..*gen };

    for suite in &suites {
        let outcome =
            score_suite(&reference, &zoo.vocab, &template, &endpoint_refs, suite, &gen);
        let positives: Vec<f64> = outcome
            .samples
            .iter()
            .filter(|s| s.endpoint_id == zoo.reference_id())
            .map(|s| s.perplexity)
            .collect();
        let negatives: Vec<f64> = outcome
            .samples
            .iter()
            .filter(|s| s.endpoint_id != zoo.reference_id())
            .map(|s| s.perplexity)
            .collect();
        let curve = roc_from_scores(&positives, &negatives)?;
        curves.insert(suite.kind.name().to_string(), curve);

        let mut means = BTreeMap::new();
        for ep in &endpoints {
            if let Some(m) = crate::ppl::mean_perplexity(&outcome.samples, ep.id()) {
                means.insert(ep.id().to_string(), m);
            }
        }
        mean_ppl.insert(suite.kind.name().to_string(), means);
        densities.push(density_export(suite.kind.name(), &outcome.samples));
        samples.extend(outcome.samples);
        skipped.extend(outcome.skipped);
    }
    Ok(BaselineOutput { samples, skipped, curves, mean_ppl, densities })
}

fn density_export(suite: &str, samples: &[PplSample]) -> DensityExport {
    let bins = 20usize;
    let logs: Vec<f64> = samples.iter().map(|s| s.perplexity.log10()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for s in samples {
        let b = (((s.perplexity.log10() - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        counts.entry(s.endpoint_id.clone()).or_insert_with(|| vec![0; bins])[b] += 1;
    }
    DensityExport { suite: suite.to_string(), log10_lo: lo, log10_hi: hi, bins, counts }
}
