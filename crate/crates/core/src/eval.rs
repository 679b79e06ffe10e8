//! Evaluation metrics, single-attack baselines, hyperparameter sweeps and
//! aggregation over repeated runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::features::{mink_feature, AttackFeatures, FeatureError};
use crate::ngram::TokenScores;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("AUC needs both members and non-members ({n_pos} positive, {n_neg} negative)")]
    SingleLabel { n_pos: usize, n_neg: usize },
    #[error("no examples to evaluate")]
    Empty,
    #[error("score for {0:?} is not finite")]
    NonFinite(String),
    #[error("example {0:?} has no membership label")]
    Unlabeled(String),
    #[error("unknown attack {0:?} (expected loss, ref, mink or zlib)")]
    UnknownAttack(String),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("aggregation needs at least one run")]
    NoRuns,
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// A score where higher means more member-like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub doc_id: String,
    pub score: f64,
    pub label: u8,
}

impl ScoredExample {
    pub fn new(doc_id: impl Into<String>, score: f64, label: u8) -> Self {
        Self {
            doc_id: doc_id.into(),
            score,
            label,
        }
    }
}

fn check_examples(examples: &[ScoredExample]) -> Result<(usize, usize)> {
    let mut n_pos = 0;
    for e in examples {
        if !e.score.is_finite() {
            return Err(EvalError::NonFinite(e.doc_id.clone()));
        }
        if e.label == 1 {
            n_pos += 1;
        }
    }
    let n_neg = examples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleLabel { n_pos, n_neg });
    }
    Ok((n_pos, n_neg))
}

/// Mann-Whitney AUC: the fraction of (member, non-member) pairs where the
/// member scores higher, with ties counted as one half. O(n log n).
pub fn auc_roc(examples: &[ScoredExample]) -> Result<f64> {
    check_examples(examples)?;
    let scores: Vec<f64> = examples.iter().map(|e| e.score).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    auc_from_scores(&scores, &labels)
}

/// [`auc_roc`] over parallel slices. Labels are 1 for positives, anything
/// else for negatives.
pub fn auc_from_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
    for (i, (&s, &l)) in scores.iter().zip(labels).enumerate() {
        if !s.is_finite() {
            return Err(EvalError::NonFinite(format!("#{i}")));
        }
        pairs.push((s, l == 1));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleLabel { n_pos, n_neg });
    }

    // Twice the U statistic, kept integral so the sum is exact.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u128, 0u128);
        // total_cmp puts -0.0 before 0.0; `==` still groups them.
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        twice_u += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub accuracy: f64,
    /// 0 when nothing was predicted positive; see `precision_defined`.
    pub precision: f64,
    pub precision_defined: bool,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Predicts member iff `score >= threshold` and tabulates the confusion
/// matrix.
pub fn confusion_metrics(examples: &[ScoredExample], threshold: f64) -> Result<MetricsReport> {
    let (n_pos, n_neg) = check_examples(examples)?;
    let (mut tp, mut fp) = (0, 0);
    for e in examples {
        if e.score >= threshold {
            if e.label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let fn_ = n_pos - tp;
    let tn = n_neg - fp;
    let precision_defined = tp + fp > 0;
    let precision = if precision_defined {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = tp as f64 / n_pos as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        auc: auc_roc(examples)?,
        accuracy: (tp + tn) as f64 / examples.len() as f64,
        precision,
        precision_defined,
        recall,
        f1,
        threshold,
        n_pos,
        n_neg,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Threshold maximising balanced accuracy, searched over the observed scores.
/// Ties keep the lowest threshold.
pub fn best_balanced_threshold(examples: &[ScoredExample]) -> Result<f64> {
    let (n_pos, n_neg) = check_examples(examples)?;
    let mut sorted: Vec<&ScoredExample> = examples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Sweep thresholds upward; everything at index >= i is predicted member.
    let (mut tp, mut fp) = (n_pos, n_neg);
    let mut best = (f64::NEG_INFINITY, sorted[0].score);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        let balanced = 0.5 * (tp as f64 / n_pos as f64 + (n_neg - fp) as f64 / n_neg as f64);
        if balanced > best.0 {
            best = (balanced, threshold);
        }
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].label == 1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
    }
    Ok(best.1)
}

/// The four single-statistic attacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attack {
    Loss,
    Ref,
    Mink,
    Zlib,
}

impl Attack {
    pub const ALL: [Attack; 4] = [Attack::Loss, Attack::Ref, Attack::Mink, Attack::Zlib];

    pub fn name(self) -> &'static str {
        match self {
            Attack::Loss => "loss",
            Attack::Ref => "ref",
            Attack::Mink => "mink",
            Attack::Zlib => "zlib",
        }
    }

    /// Member-like orientation: low loss, low ΔL, high min-k logprob and low
    /// normalised loss all indicate membership.
    pub fn oriented_score(self, f: &AttackFeatures) -> f64 {
        match self {
            Attack::Loss => -f.f_loss,
            Attack::Ref => -f.f_ref,
            Attack::Mink => f.f_mink,
            Attack::Zlib => -f.f_zlib,
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attack {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Attack::Loss),
            "ref" => Ok(Attack::Ref),
            "mink" | "min-k" => Ok(Attack::Mink),
            "zlib" => Ok(Attack::Zlib),
            other => Err(EvalError::UnknownAttack(other.to_string())),
        }
    }
}

pub fn single_attack_scores(features: &[AttackFeatures], attack: Attack) -> Result<Vec<ScoredExample>> {
    if features.is_empty() {
        return Err(EvalError::Empty);
    }
    features
        .iter()
        .map(|f| {
            let label = f.label.ok_or_else(|| EvalError::Unlabeled(f.doc_id.clone()))?;
            Ok(ScoredExample::new(f.doc_id.clone(), attack.oriented_score(f), label))
        })
        .collect()
}

/// Same as [`single_attack_scores`] but takes the attack by name.
pub fn single_attack_scores_by_name(features: &[AttackFeatures], attack: &str) -> Result<Vec<ScoredExample>> {
    single_attack_scores(features, attack.parse()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub value: f64,
}

/// AUC of the Min-k% attack at each `k`, recomputed from stored token scores.
pub fn sweep_mink(docs: &[(&TokenScores, u8)], grid: &[f64]) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    grid.iter()
        .map(|&k| {
            let mut scores = Vec::with_capacity(docs.len());
            let mut labels = Vec::with_capacity(docs.len());
            for (s, label) in docs {
                scores.push(mink_feature(s, k)?);
                labels.push(*label);
            }
            Ok(SweepPoint {
                x: k,
                value: auc_from_scores(&scores, &labels)?,
            })
        })
        .collect()
}

/// Accuracy against `points` evenly spaced decision thresholds spanning the
/// observed score range. Used for attacks without an internal hyperparameter.
pub fn threshold_sweep(examples: &[ScoredExample], points: usize) -> Result<Vec<SweepPoint>> {
    check_examples(examples)?;
    if points == 0 {
        return Err(EvalError::EmptyGrid);
    }
    let lo = examples.iter().map(|e| e.score).fold(f64::INFINITY, f64::min);
    let hi = examples.iter().map(|e| e.score).fold(f64::NEG_INFINITY, f64::max);
    (0..points)
        .map(|i| {
            let t = if points == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (points - 1) as f64
            };
            Ok(SweepPoint {
                x: t,
                value: confusion_metrics(examples, t)?.accuracy,
            })
        })
        .collect()
}

/// Mean and sample standard deviation (n − 1) of repeated runs. With a single
/// run only the mean is available.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Aggregate {
    /// `m±s` to three decimals, or just `m` without a standard deviation.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{:.3}±{:.3}", self.mean, s),
            None => format!("{:.3}", self.mean),
        }
    }
}

pub fn aggregate_runs(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let n = values.len();
    // Shifted by the first value so identical runs give exactly zero spread.
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(Aggregate { mean, std, n })
}
