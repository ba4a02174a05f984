use serde::{Deserialize, Serialize};

use super::PplError;

/// Receiver operating characteristic from a threshold sweep. Points are
/// (fpr, tpr), sorted by fpr nondecreasing; auc by the trapezoid rule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<[f64; 2]>,
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Builds the curve for a score where LOW values indicate the positive
/// class (perplexity under the reference model): classify positive iff
/// score <= threshold. The sweep includes a below-minimum threshold
/// (nothing classified positive, point (0,0)) and an above-maximum one
/// (everything positive, point (1,1)).
pub fn roc_from_scores(positive: &[f64], negative: &[f64]) -> Result<RocCurve, PplError> {
    if positive.is_empty() || negative.is_empty() {
        return Err(PplError::SingleClass {
            positives: positive.len(),
            negatives: negative.len(),
        });
    }
    let mut thresholds: Vec<f64> = positive.iter().chain(negative.iter()).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();
    let lo = thresholds.first().unwrap() - 1.0;
    let hi = thresholds.last().unwrap() + 1.0;
    thresholds.insert(0, lo);
    thresholds.push(hi);

    let mut points = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let tpr = positive.iter().filter(|&&s| s <= t).count() as f64 / positive.len() as f64;
        let fpr = negative.iter().filter(|&&s| s <= t).count() as f64 / negative.len() as f64;
        points.push([fpr, tpr]);
    }
    let mut auc = 0.0f64;
    for w in points.windows(2) {
        auc += (w[1][0] - w[0][0]) * (w[0][1] + w[1][1]) / 2.0;
    }
    Ok(RocCurve { points, thresholds, auc })
}
