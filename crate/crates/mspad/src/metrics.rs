//! Threshold-sweep evaluation: ROC, AUC, TPR at fixed FPR, BPCER20, EER and
//! thresholded accuracy.
//!
//! Attack is the positive class throughout, so FPR is the bona-fide error
//! rate (BPCER) and 1 - TPR the attack error rate (APCER). Classification
//! at a threshold uses `score >= threshold`.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least one sample of each class (bona-fide: {n_bf}, attack: {n_pa})")]
    SingleClass { n_bf: usize, n_pa: usize },
    #[error("sample `{0}` has a non-finite score")]
    NonFiniteScore(String),
    #[error("sample `{sample_id}` has label {label}, expected 0 or 1")]
    BadLabel { sample_id: String, label: u8 },
}

/// One scored sample: attack probability plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample_id: String,
    pub score: f64,
    /// 0 = bona-fide, 1 = attack.
    pub label: u8,
}

impl ScoredSample {
    pub fn new(sample_id: impl Into<String>, score: f64, label: u8) -> Self {
        ScoredSample {
            sample_id: sample_id.into(),
            score,
            label,
        }
    }
}

/// One ROC vertex; `threshold` is the smallest score classified as attack
/// at this operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

fn class_counts(samples: &[ScoredSample]) -> Result<(usize, usize), MetricsError> {
    let mut n_bf = 0usize;
    let mut n_pa = 0usize;
    for s in samples {
        if !s.score.is_finite() {
            return Err(MetricsError::NonFiniteScore(s.sample_id.clone()));
        }
        match s.label {
            0 => n_bf += 1,
            1 => n_pa += 1,
            label => {
                return Err(MetricsError::BadLabel {
                    sample_id: s.sample_id.clone(),
                    label,
                })
            }
        }
    }
    if n_bf == 0 || n_pa == 0 {
        return Err(MetricsError::SingleClass { n_bf, n_pa });
    }
    Ok((n_bf, n_pa))
}

/// Exact ROC curve: one vertex per distinct score (ties grouped), endpoints
/// (0,0) and (1,1) included, sorted by descending threshold.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<RocPoint>, MetricsError> {
    let (n_bf, n_pa) = class_counts(samples)?;
    let mut sorted: Vec<(f64, u8)> = samples.iter().map(|s| (s.score, s.label)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_bf as f64,
            tpr: tp as f64 / n_pa as f64,
            threshold,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve.
pub fn auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Highest TPR among operating points with FPR at or below the target
/// (step convention, no interpolation).
pub fn tpr_at_fpr(roc: &[RocPoint], fpr_target: f64) -> f64 {
    roc.iter()
        .filter(|p| p.fpr <= fpr_target)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// Lowest bona-fide error rate among operating points whose attack error
/// rate (1 - TPR) is at or below the target.
pub fn bpcer_at_apcer(roc: &[RocPoint], apcer_target: f64) -> f64 {
    roc.iter()
        .filter(|p| 1.0 - p.tpr <= apcer_target)
        .map(|p| p.fpr)
        .fold(1.0, f64::min)
}

/// Rate where FPR equals 1 - TPR, linearly interpolated between the
/// bracketing vertices.
pub fn eer(roc: &[RocPoint]) -> f64 {
    // f = fpr - (1 - tpr) is nondecreasing along the curve, from -1 to +1.
    for w in roc.windows(2) {
        let f0 = w[0].fpr + w[0].tpr - 1.0;
        let f1 = w[1].fpr + w[1].tpr - 1.0;
        if f0 <= 0.0 && f1 >= 0.0 {
            if f1 == f0 {
                return w[0].fpr;
            }
            let t = -f0 / (f1 - f0);
            return w[0].fpr + t * (w[1].fpr - w[0].fpr);
        }
    }
    // Unreachable for a valid curve; the endpoints bracket zero.
    0.5
}

/// Fraction of samples whose thresholded prediction matches the label.
pub fn accuracy_at_threshold(samples: &[ScoredSample], tau: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|s| (s.score >= tau) == (s.label == 1))
        .count();
    correct as f64 / samples.len() as f64
}

/// The score threshold of the EER operating point: where the two error
/// rates cross, taken from the bracketing vertex.
pub fn eer_threshold(roc: &[RocPoint]) -> f64 {
    for w in roc.windows(2) {
        let f1 = w[1].fpr + w[1].tpr - 1.0;
        if f1 >= 0.0 {
            return w[1].threshold;
        }
    }
    0.5
}

/// All metrics for one scored set.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    /// TPR at 0.2% FPR.
    pub tpr_at_fpr_002: f64,
    /// BPCER at 5% APCER.
    pub bpcer20: f64,
    pub eer: f64,
    pub accuracy_at_05: f64,
    pub n_bf: usize,
    pub n_pa: usize,
}

pub fn evaluate(samples: &[ScoredSample]) -> Result<EvaluationReport, MetricsError> {
    let (n_bf, n_pa) = class_counts(samples)?;
    let roc = roc_curve(samples)?;
    Ok(EvaluationReport {
        auc: auc(&roc),
        tpr_at_fpr_002: tpr_at_fpr(&roc, 0.002),
        bpcer20: bpcer_at_apcer(&roc, 0.05),
        eer: eer(&roc),
        accuracy_at_05: accuracy_at_threshold(samples, 0.5),
        n_bf,
        n_pa,
        roc,
    })
}
