//! The four attack statistics and the ensemble feature vector.
//!
//! All statistics work on natural-log token probabilities:
//!
//! * `f_loss`: mean per-token negative log-likelihood (nats/token).
//! * `f_ref`: `f_loss` under the target minus `f_loss` under the reference.
//! * `f_mink`: mean log-probability of the lowest `k%` tokens.
//! * `f_zlib`: total negative log-likelihood divided by the zlib size of the
//!   text (nats/byte).
//!
//! Signs are left raw; orientation for single-attack scoring lives in
//! [`crate::eval`].

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::compress::{deflate_size, CompressError};
use crate::corpus::Document;
use crate::ngram::TokenScores;

pub const NUM_FEATURES: usize = 4;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = ["f_loss", "f_ref", "f_mink", "f_zlib"];
pub const DEFAULT_K_PERCENT: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("document {0:?} has no token scores")]
    EmptyScores(String),
    #[error("target scores are for {target:?} but reference scores are for {reference:?}")]
    DocMismatch { target: String, reference: String },
    #[error("scores for {scores:?} do not belong to document {doc:?}")]
    WrongDocument { doc: String, scores: String },
    #[error("k must lie in (0, 100], got {0}")]
    BadK(f64),
    #[error("document {0:?}: {1}")]
    Compress(String, CompressError),
    #[error("feature CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("feature CSV row {row}: {message}")]
    CsvRow { row: usize, message: String },
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// `f(x) = [f_loss, f_ref, f_mink, f_zlib]` for one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackFeatures {
    pub doc_id: String,
    pub f_loss: f64,
    pub f_ref: f64,
    pub f_mink: f64,
    pub f_zlib: f64,
    pub label: Option<u8>,
}

impl AttackFeatures {
    /// Values in the fixed order of [`FEATURE_NAMES`].
    pub fn values(&self) -> [f64; NUM_FEATURES] {
        [self.f_loss, self.f_ref, self.f_mink, self.f_zlib]
    }
}

fn non_empty(scores: &TokenScores) -> Result<()> {
    if scores.is_empty() {
        Err(FeatureError::EmptyScores(scores.doc_id.clone()))
    } else {
        Ok(())
    }
}

fn total_logprob(scores: &TokenScores) -> f64 {
    scores.logprobs.iter().sum()
}

/// Mean per-token NLL, `-(Σ logprob) / T`.
pub fn loss_feature(scores: &TokenScores) -> Result<f64> {
    non_empty(scores)?;
    Ok(-(total_logprob(scores) / scores.len() as f64))
}

pub fn ref_feature(target: &TokenScores, reference: &TokenScores) -> Result<f64> {
    if target.doc_id != reference.doc_id {
        return Err(FeatureError::DocMismatch {
            target: target.doc_id.clone(),
            reference: reference.doc_id.clone(),
        });
    }
    if target.len() != reference.len() {
        log::debug!(
            "{}: target has {} tokens, reference has {}",
            target.doc_id,
            target.len(),
            reference.len()
        );
    }
    Ok(loss_feature(target)? - loss_feature(reference)?)
}

/// Mean logprob of the `max(1, floor(T·k/100))` lowest tokens.
///
/// Ties go to the earlier index. The selected values are summed in index order,
/// so `mink_feature(s, 100) == -loss_feature(s)` bit for bit.
pub fn mink_feature(scores: &TokenScores, k_percent: f64) -> Result<f64> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(FeatureError::BadK(k_percent));
    }
    non_empty(scores)?;
    let t = scores.len();
    let m = ((t as f64 * k_percent / 100.0).floor() as usize).clamp(1, t);
    let lp = &scores.logprobs;
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(a.cmp(&b)));
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    let sum: f64 = chosen.iter().map(|&i| lp[i]).sum();
    Ok(sum / m as f64)
}

/// Total NLL (nats) over the zlib size of `text` (bytes).
pub fn zlib_feature(scores: &TokenScores, text: &str) -> Result<f64> {
    non_empty(scores)?;
    let z = deflate_size(text).map_err(|e| FeatureError::Compress(scores.doc_id.clone(), e))?;
    Ok(-total_logprob(scores) / z.bytes() as f64)
}

pub fn build_features(
    doc: &Document,
    target: &TokenScores,
    reference: &TokenScores,
    k_percent: f64,
) -> Result<AttackFeatures> {
    if target.doc_id != doc.id {
        return Err(FeatureError::WrongDocument {
            doc: doc.id.clone(),
            scores: target.doc_id.clone(),
        });
    }
    Ok(AttackFeatures {
        doc_id: doc.id.clone(),
        f_loss: loss_feature(target)?,
        f_ref: ref_feature(target, reference)?,
        f_mink: mink_feature(target, k_percent)?,
        f_zlib: zlib_feature(target, &doc.text)?,
        label: doc.label,
    })
}

/// Writes the interchange CSV: `doc_id,f_loss,f_ref,f_mink,f_zlib,label`.
/// Unknown labels are left blank.
pub fn write_features_csv<W: Write>(out: W, features: &[AttackFeatures]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["doc_id", "f_loss", "f_ref", "f_mink", "f_zlib", "label"])?;
    for f in features {
        let label = f.label.map(|l| l.to_string()).unwrap_or_default();
        writer.write_record([
            f.doc_id.clone(),
            f.f_loss.to_string(),
            f.f_ref.to_string(),
            f.f_mink.to_string(),
            f.f_zlib.to_string(),
            label,
        ])?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_features_csv<R: Read>(input: R) -> Result<Vec<AttackFeatures>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let bad = |message: String| FeatureError::CsvRow { row, message };
        if record.len() != 6 {
            return Err(bad(format!("expected 6 columns, found {}", record.len())));
        }
        let num = |j: usize| -> Result<f64> {
            record[j]
                .parse::<f64>()
                .map_err(|e| bad(format!("column {}: {e}", j + 1)))
        };
        let label = match &record[5] {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => return Err(bad(format!("label {other:?} is not 0 or 1"))),
        };
        out.push(AttackFeatures {
            doc_id: record[0].to_string(),
            f_loss: num(1)?,
            f_ref: num(2)?,
            f_mink: num(3)?,
            f_zlib: num(4)?,
            label,
        });
    }
    Ok(out)
}
