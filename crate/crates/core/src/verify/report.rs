use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::ChatEndpoint;
use crate::rng::substream_indexed;
use crate::zoo::{digit_prompt, GenerationConfig, ZooRole};

use super::{parse_answer, TrialOutcome, Verdict, VerifyError};

/// Per-endpoint tallies. `answered` excludes transport errors; they never
/// enter a denominator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EndpointCounts {
    pub endpoint_id: String,
    pub role: ZooRole,
    pub hits: usize,
    pub misses: usize,
    pub invalids: usize,
    pub errors: usize,
    pub answered: usize,
    /// hits / answered
    pub hit_rate: f64,
    /// hits / (answered - invalids); NaN-free: 0 when undefined
    pub hit_rate_valid: f64,
    /// invalids / answered
    pub invalid_rate: f64,
}

/// Aggregated verification outcome for one suffix set. Positive endpoints
/// are the models the suffixes were optimized on; everything else pools
/// into the false-positive side with its analytic floor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationReport {
    pub n: usize,
    pub suffix_source: Vec<String>,
    pub per_endpoint: Vec<EndpointCounts>,
    /// Pooled over positive endpoints: hits / (answered - invalids).
    pub tpr: f64,
    /// Pooled over positive endpoints: invalids / answered.
    pub invalid_rate: f64,
    pub fpr_floor: f64,
    /// Pooled over non-positive endpoints: hits / answered.
    pub fpr_observed: f64,
    /// max(fpr_floor, fpr_observed)
    pub fpr: f64,
}

fn tally<'a>(outcomes: impl Iterator<Item = &'a TrialOutcome>) -> (usize, usize, usize, usize) {
    let (mut hits, mut misses, mut invalids, mut errors) = (0, 0, 0, 0);
    for o in outcomes {
        match o.verdict {
            Verdict::Hit => hits += 1,
            Verdict::Miss => misses += 1,
            Verdict::Invalid => invalids += 1,
            Verdict::Error => errors += 1,
        }
    }
    (hits, misses, invalids, errors)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Builds the report from recorded outcomes. Pure: re-aggregating a
/// persisted trial log reproduces identical numbers.
pub fn build_report(
    outcomes: &[TrialOutcome],
    suffix_source: &[String],
    roles: &HashMap<String, ZooRole>,
) -> Result<VerificationReport, VerifyError> {
    if outcomes.is_empty() {
        return Err(VerifyError::EmptyOutcomes);
    }
    let n = outcomes[0].n;
    let endpoint_ids: BTreeSet<&str> =
        outcomes.iter().map(|o| o.endpoint_id.as_str()).collect();
    let mut per_endpoint = Vec::new();
    for id in &endpoint_ids {
        let (hits, misses, invalids, errors) =
            tally(outcomes.iter().filter(|o| o.endpoint_id == *id));
        let answered = hits + misses + invalids;
        let role = *roles
            .get(*id)
            .ok_or_else(|| VerifyError::UnknownEndpoint(id.to_string()))?;
        per_endpoint.push(EndpointCounts {
            endpoint_id: id.to_string(),
            role,
            hits,
            misses,
            invalids,
            errors,
            answered,
            hit_rate: ratio(hits, answered),
            hit_rate_valid: ratio(hits, answered - invalids),
            invalid_rate: ratio(invalids, answered),
        });
    }

    let is_positive = |c: &EndpointCounts| suffix_source.contains(&c.endpoint_id);
    let (mut p_hits, mut p_ans, mut p_inv) = (0usize, 0usize, 0usize);
    let (mut n_hits, mut n_ans) = (0usize, 0usize);
    for c in &per_endpoint {
        if is_positive(c) {
            p_hits += c.hits;
            p_ans += c.answered;
            p_inv += c.invalids;
        } else {
            n_hits += c.hits;
            n_ans += c.answered;
        }
    }
    let fpr_floor = 10f64.powi(-(n as i32));
    let fpr_observed = ratio(n_hits, n_ans);
    Ok(VerificationReport {
        n,
        suffix_source: suffix_source.to_vec(),
        per_endpoint,
        tpr: ratio(p_hits, p_ans - p_inv),
        invalid_rate: ratio(p_inv, p_ans),
        fpr_floor,
        fpr_observed,
        fpr: fpr_floor.max(fpr_observed),
    })
}

/// Hit-rate grid: suffixes optimized on the row signature, evaluated on the
/// column endpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub rates: Vec<Vec<f64>>,
}

/// `suffix_sources` maps each suffix id to its source signature (joined
/// model ids for ensembles).
pub fn confusion_matrix(
    outcomes: &[TrialOutcome],
    suffix_sources: &HashMap<String, String>,
) -> Result<ConfusionMatrix, VerifyError> {
    if outcomes.is_empty() {
        return Err(VerifyError::EmptyOutcomes);
    }
    let mut rows: BTreeSet<String> = BTreeSet::new();
    for o in outcomes {
        let sig = suffix_sources
            .get(&o.suffix_id)
            .ok_or_else(|| VerifyError::UnknownSuffix(o.suffix_id.clone()))?;
        rows.insert(sig.clone());
    }
    let cols: BTreeSet<String> = outcomes.iter().map(|o| o.endpoint_id.clone()).collect();
    let rows: Vec<String> = rows.into_iter().collect();
    let cols: Vec<String> = cols.into_iter().collect();
    let mut rates = vec![vec![0.0f64; cols.len()]; rows.len()];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, col) in cols.iter().enumerate() {
            let (hits, misses, invalids, _) = tally(outcomes.iter().filter(|o| {
                &o.endpoint_id == col && suffix_sources[&o.suffix_id] == *row
            }));
            rates[ri][ci] = ratio(hits, hits + misses + invalids);
        }
    }
    Ok(ConfusionMatrix { rows, cols, rates })
}

impl ConfusionMatrix {
    /// CSV grid: optimized-on in rows, evaluated-on in columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("optimized_on");
        for c in &self.cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(self.rates.iter()) {
            out.push_str(r);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Discrete operating points, one per answer length, exported in the same
/// shape as the baseline curves for overlay plots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrapRocPoints {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
}

pub fn trap_roc_points(reports: &[&VerificationReport]) -> Result<TrapRocPoints, VerifyError> {
    let ns: BTreeSet<usize> = reports.iter().map(|r| r.n).collect();
    if ns.len() < 2 {
        return Err(VerifyError::NeedMultipleN(ns.len()));
    }
    let mut by_n: BTreeMap<usize, &VerificationReport> = BTreeMap::new();
    for r in reports {
        by_n.insert(r.n, r);
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (n, r) in by_n {
        points.push([r.fpr, r.tpr]);
        labels.push(n);
    }
    Ok(TrapRocPoints { points, labels })
}

/// Empirical answer histogram for the closed question, the fingerprint of
/// a model's unsuffixed behaviour.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub endpoint_id: String,
    pub prompt: String,
    pub samples: usize,
    pub valid: usize,
    pub invalid: usize,
    pub errors: usize,
    pub histogram: BTreeMap<String, usize>,
    pub mode_answer: Option<String>,
    /// mode count / valid answers
    pub mode_frequency: f64,
    pub non_unique_fingerprint: bool,
}

/// Samples the plain digit question many times and histograms the parsed
/// answers. `flag_threshold` marks distributions whose mode dominates.
pub fn collect_answer_distribution(
    endpoint: &ChatEndpoint,
    n: usize,
    samples: usize,
    gen: &GenerationConfig,
    flag_threshold: f64,
) -> AnswerDistribution {
    let prompt = digit_prompt(n);
    let answers: Vec<Option<Option<String>>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let stream = format!("distribution:{}", endpoint.id());
            let seed: u64 = substream_indexed(gen.seed, &stream, i as u64).gen();
            let g = GenerationConfig { seed, ..*gen };
            endpoint.chat(&prompt, &g).ok().map(|text| parse_answer(&text, n))
        })
        .collect();
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    let (mut valid, mut invalid, mut errors) = (0usize, 0usize, 0usize);
    for a in answers {
        match a {
            Some(Some(ans)) => {
                valid += 1;
                *histogram.entry(ans).or_insert(0) += 1;
            }
            Some(None) => invalid += 1,
            None => errors += 1,
        }
    }
    let mode = histogram
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(k, &v)| (k.clone(), v));
    let mode_frequency = mode.as_ref().map_or(0.0, |(_, c)| ratio(*c, valid));
    AnswerDistribution {
        endpoint_id: endpoint.id().to_string(),
        prompt,
        samples,
        valid,
        invalid,
        errors,
        histogram,
        mode_answer: mode.map(|(k, _)| k),
        mode_frequency,
        non_unique_fingerprint: mode_frequency >= flag_threshold,
    }
}
