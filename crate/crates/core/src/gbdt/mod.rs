//! Gradient-boosted regression trees for binary membership classification.
//!
//! Each round fits one tree to the logistic-loss gradients `g = p − y` and
//! hessians `h = p(1 − p)` of the current margins. Leaves take the Newton step
//! `w = −G / (H + λ)`, and a split is kept only when its gain
//! `½[G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)] − γ` is strictly positive and
//! both children carry at least `min_child_weight` hessian. Margins start at
//! the log-odds of the training positive rate and move by `η·w` per round.
//!
//! Fitting is deterministic: there is no row or column subsampling, and split
//! ties resolve to the lowest (feature, threshold).

mod cv;
mod tree;

use serde::{Deserialize, Serialize};

pub use cv::{grid_search_cv, stratified_folds, CvResult, CvRow, ParamGrid};
pub use tree::{leaf_weight, split_gain, Node, Row, Tree};

use crate::features::{AttackFeatures, NUM_FEATURES};
use tree::TreeBuilder;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum GbdtError {
    #[error("need at least two training examples, got {0}")]
    TooFewExamples(usize),
    #[error("training labels must include both members and non-members")]
    SingleLabel,
    #[error("example {0:?} has no membership label")]
    Unlabeled(String),
    #[error("example {0:?} has a non-finite feature value")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    BadParams(String),
    #[error("parameter grid is empty")]
    EmptyGrid,
    #[error("cross-validation needs at least {folds} examples per class, got {n_pos} members and {n_neg} non-members")]
    TooFewForFolds { folds: usize, n_pos: usize, n_neg: usize },
    #[error("model file is corrupt: {0}")]
    Corrupt(String),
    #[error("model format version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
}

pub type Result<T, E = GbdtError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 3,
            learning_rate: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GbdtError::BadParams(m));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1".into());
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning_rate {} is outside (0, 1]", self.learning_rate));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("min_child_weight", self.min_child_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(margin: f64) -> f64 {
    1.0 / (1.0 + (-margin).exp())
}

/// Mean logistic loss of labels under margins, computed stably.
pub fn logistic_loss(margins: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            // log(1 + e^m) − y·m
            let softplus = if m > 0.0 {
                m + (-m).exp().ln_1p()
            } else {
                m.exp().ln_1p()
            };
            softplus - f64::from(y) * m
        })
        .sum();
    total / margins.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub params: GbdtParams,
    pub base_margin: f64,
    pub trees: Vec<Tree>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    params: GbdtParams,
    base_margin: f64,
    trees: Vec<Tree>,
}

impl GbdtModel {
    /// A model without trees: every prediction is `sigmoid(base_margin)`.
    pub fn constant(params: GbdtParams, base_margin: f64) -> Self {
        Self {
            params,
            base_margin,
            trees: Vec::new(),
        }
    }

    pub fn fit(features: &[AttackFeatures], params: &GbdtParams) -> Result<Self> {
        let (rows, labels) = to_matrix(features)?;
        fit_rows(&rows, &labels, params).map(|(m, _)| m)
    }

    /// Like [`GbdtModel::fit`], also returning the mean training logistic loss
    /// before the first tree and after every round.
    pub fn fit_traced(features: &[AttackFeatures], params: &GbdtParams) -> Result<(Self, Vec<f64>)> {
        let (rows, labels) = to_matrix(features)?;
        fit_rows(&rows, &labels, params)
    }

    pub fn predict_margin_row(&self, row: &Row) -> f64 {
        let eta = self.params.learning_rate;
        self.trees
            .iter()
            .fold(self.base_margin, |m, tree| m + eta * tree.predict(row))
    }

    pub fn predict_margin(&self, features: &AttackFeatures) -> Result<f64> {
        Ok(self.predict_margin_row(&finite_row(features)?))
    }

    /// Membership probability, kept strictly inside (0, 1).
    pub fn predict_proba(&self, features: &AttackFeatures) -> Result<f64> {
        Ok(proba_from_margin(self.predict_margin(features)?))
    }

    /// Member iff the probability reaches `threshold` (0.5 by convention).
    pub fn predict_label(&self, features: &AttackFeatures, threshold: f64) -> Result<u8> {
        Ok(u8::from(self.predict_proba(features)? >= threshold))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            params: self.params.clone(),
            base_margin: self.base_margin,
            trees: self.trees.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| GbdtError::Corrupt(e.to_string()))?;
        if probe.format_version != MODEL_FORMAT_VERSION {
            return Err(GbdtError::Version {
                found: probe.format_version,
                supported: MODEL_FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_str(text).map_err(|e| GbdtError::Corrupt(e.to_string()))?;
        for (i, tree) in file.trees.iter().enumerate() {
            if !tree.is_well_formed() {
                return Err(GbdtError::Corrupt(format!("tree {i} is malformed")));
            }
        }
        Ok(Self {
            params: file.params,
            base_margin: file.base_margin,
            trees: file.trees,
        })
    }
}

pub fn proba_from_margin(margin: f64) -> f64 {
    const LO: f64 = f64::MIN_POSITIVE;
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    sigmoid(margin).clamp(LO, HI)
}

fn finite_row(f: &AttackFeatures) -> Result<Row> {
    let row = f.values();
    if row.iter().all(|v| v.is_finite()) {
        Ok(row)
    } else {
        Err(GbdtError::NonFinite(f.doc_id.clone()))
    }
}

pub(crate) fn to_matrix(features: &[AttackFeatures]) -> Result<(Vec<Row>, Vec<u8>)> {
    let mut rows = Vec::with_capacity(features.len());
    let mut labels = Vec::with_capacity(features.len());
    for f in features {
        rows.push(finite_row(f)?);
        labels.push(f.label.ok_or_else(|| GbdtError::Unlabeled(f.doc_id.clone()))?);
    }
    Ok((rows, labels))
}

/// Boosting on a dense matrix. Returns the model and the loss trace.
pub fn fit_rows(rows: &[Row], labels: &[u8], params: &GbdtParams) -> Result<(GbdtModel, Vec<f64>)> {
    params.validate()?;
    if rows.len() < 2 {
        return Err(GbdtError::TooFewExamples(rows.len()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(GbdtError::SingleLabel);
    }
    if let Some(i) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(GbdtError::NonFinite(format!("#{i}")));
    }

    let prevalence = n_pos as f64 / labels.len() as f64;
    let base_margin = (prevalence / (1.0 - prevalence)).ln();

    let presorted: [Vec<u32>; NUM_FEATURES] = std::array::from_fn(|f| {
        let mut idx: Vec<u32> = (0..rows.len() as u32).collect();
        idx.sort_by(|&a, &b| rows[a as usize][f].total_cmp(&rows[b as usize][f]).then(a.cmp(&b)));
        idx
    });

    let mut margins = vec![base_margin; rows.len()];
    let mut grad = vec![0.0; rows.len()];
    let mut hess = vec![0.0; rows.len()];
    let mut trace = Vec::with_capacity(params.n_trees + 1);
    trace.push(logistic_loss(&margins, labels));
    let mut trees = Vec::with_capacity(params.n_trees);

    for _ in 0..params.n_trees {
        for i in 0..rows.len() {
            let p = sigmoid(margins[i]);
            grad[i] = p - f64::from(labels[i]);
            hess[i] = p * (1.0 - p);
        }
        let tree = TreeBuilder::new(rows, &grad, &hess, params).build(&presorted);
        for (m, row) in margins.iter_mut().zip(rows) {
            *m += params.learning_rate * tree.predict(row);
        }
        trace.push(logistic_loss(&margins, labels));
        trees.push(tree);
    }

    Ok((
        GbdtModel {
            params: params.clone(),
            base_margin,
            trees,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn feat(id: usize, values: [f64; 4], label: u8) -> AttackFeatures {
        AttackFeatures {
            doc_id: format!("d{id}"),
            f_loss: values[0],
            f_ref: values[1],
            f_mink: values[2],
            f_zlib: values[3],
            label: Some(label),
        }
    }

    fn random_dataset(seed: u64, n: usize) -> Vec<AttackFeatures> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|i| {
                let v = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
                let logit = 1.5 * v[0] - v[1] * v[2] + 0.5 * rng.normal();
                let label = u8::from(rng.next_f64() < sigmoid(logit));
                feat(i, v, label)
            })
            .collect()
    }

    #[test]
    fn logistic_gradient_at_zero_margin() {
        let p = sigmoid(0.0);
        assert_eq!(p, 0.5);
        assert_eq!(p - 1.0, -0.5);
        assert_eq!(p * (1.0 - p), 0.25);
    }

    #[test]
    fn margin_ln3_is_three_quarters() {
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        let model = GbdtModel::constant(GbdtParams::default(), 3f64.ln());
        let p = model.predict_proba(&feat(0, [0.0; 4], 0)).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_trees_predict_base_rate() {
        let model = GbdtModel::constant(GbdtParams::default(), 0.0);
        for v in [[0.0; 4], [5.0, -3.0, 1e9, -1e-9]] {
            assert_eq!(model.predict_proba(&feat(0, v, 0)).unwrap(), 0.5);
        }
    }

    #[test]
    fn separable_stumps_reach_full_accuracy() {
        // label 1 iff f_loss < 1.
        let data: Vec<AttackFeatures> = (0..20)
            .map(|i| {
                let x = i as f64 * 0.1 + 0.05;
                feat(i, [x, 0.0, 0.0, 0.0], u8::from(x < 1.0))
            })
            .collect();
        let params = GbdtParams { n_trees: 10, max_depth: 1, learning_rate: 0.5, ..Default::default() };
        let model = GbdtModel::fit(&data, &params).unwrap();
        let correct = data
            .iter()
            .filter(|f| model.predict_label(f, 0.5).unwrap() == f.label.unwrap())
            .count();
        assert_eq!(correct, 20);
        for tree in &model.trees {
            assert!(tree.depth() <= 1);
        }
    }

    #[test]
    fn fit_errors() {
        let params = GbdtParams::default();
        let one = vec![feat(0, [0.0; 4], 1)];
        assert!(matches!(GbdtModel::fit(&one, &params), Err(GbdtError::TooFewExamples(1))));
        let same = vec![feat(0, [0.0; 4], 1), feat(1, [1.0; 4], 1)];
        assert!(matches!(GbdtModel::fit(&same, &params), Err(GbdtError::SingleLabel)));
        let nan = vec![feat(0, [0.0; 4], 1), feat(1, [f64::NAN, 0.0, 0.0, 0.0], 0)];
        assert!(matches!(GbdtModel::fit(&nan, &params), Err(GbdtError::NonFinite(ref id)) if id == "d1"));
        let bad = GbdtParams { learning_rate: 0.0, ..Default::default() };
        let ok = vec![feat(0, [0.0; 4], 1), feat(1, [1.0; 4], 0)];
        assert!(matches!(GbdtModel::fit(&ok, &bad), Err(GbdtError::BadParams(_))));
        let model = GbdtModel::fit(&ok, &params).unwrap();
        assert!(model.predict_proba(&feat(2, [f64::NAN; 4], 0)).is_err());
    }

    #[test]
    fn base_margin_is_training_log_odds() {
        let data: Vec<AttackFeatures> = (0..8).map(|i| feat(i, [i as f64; 4], u8::from(i < 2))).collect();
        let model = GbdtModel::fit(&data, &GbdtParams::default()).unwrap();
        assert!((model.base_margin - (0.25f64 / 0.75).ln()).abs() < 1e-15);
    }

    #[test]
    fn trees_respect_depth_and_shape() {
        let data = random_dataset(3, 200);
        for depth in 1..=4 {
            let params = GbdtParams { n_trees: 20, max_depth: depth, ..Default::default() };
            let model = GbdtModel::fit(&data, &params).unwrap();
            for tree in &model.trees {
                assert!(tree.is_well_formed());
                assert!(tree.depth() <= depth);
            }
        }
    }

    #[test]
    fn probabilities_stay_open_interval() {
        let data: Vec<AttackFeatures> = (0..40).map(|i| feat(i, [i as f64, 0.0, 0.0, 0.0], u8::from(i < 20))).collect();
        let params = GbdtParams { n_trees: 200, max_depth: 2, learning_rate: 1.0, lambda: 0.0, ..Default::default() };
        let model = GbdtModel::fit(&data, &params).unwrap();
        for f in &data {
            let p = model.predict_proba(f).unwrap();
            assert!(p > 0.0 && p < 1.0, "{p}");
        }
    }

    #[test]
    fn fit_is_bitwise_reproducible() {
        let data = random_dataset(9, 150);
        let params = GbdtParams { n_trees: 30, ..Default::default() };
        let a = GbdtModel::fit(&data, &params).unwrap();
        let b = GbdtModel::fit(&data, &params).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let data = random_dataset(5, 120);
        let model = GbdtModel::fit(&data, &GbdtParams { n_trees: 15, ..Default::default() }).unwrap();
        let back = GbdtModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
        for f in &data {
            assert_eq!(
                back.predict_margin(f).unwrap().to_bits(),
                model.predict_margin(f).unwrap().to_bits()
            );
        }
        let newer = model.to_json().replacen("\"format_version\": 1", "\"format_version\": 9", 1);
        assert!(matches!(GbdtModel::from_json(&newer), Err(GbdtError::Version { found: 9, .. })));
        assert!(matches!(GbdtModel::from_json("{\"format_version\": 1"), Err(GbdtError::Corrupt(_))));
    }

    #[test]
    fn monotone_feature_transform_preserves_predictions() {
        let data = random_dataset(21, 150);
        let mapped: Vec<AttackFeatures> = data
            .iter()
            .map(|f| AttackFeatures { f_loss: f.f_loss.exp(), f_mink: 3.0 * f.f_mink - 7.0, ..f.clone() })
            .collect();
        let params = GbdtParams { n_trees: 25, max_depth: 3, ..Default::default() };
        let a = GbdtModel::fit(&data, &params).unwrap();
        let b = GbdtModel::fit(&mapped, &params).unwrap();
        for (ta, tb) in a.trees.iter().zip(&b.trees) {
            assert_eq!(ta.nodes.len(), tb.nodes.len());
            for (na, nb) in ta.nodes.iter().zip(&tb.nodes) {
                match (na, nb) {
                    (Node::Split { feature: fa, left: la, right: ra, .. }, Node::Split { feature: fb, left: lb, right: rb, .. }) => {
                        assert_eq!((fa, la, ra), (fb, lb, rb));
                    }
                    (Node::Leaf { weight: wa, .. }, Node::Leaf { weight: wb, .. }) => assert_eq!(wa, wb),
                    _ => panic!("tree structure differs"),
                }
            }
        }
        for (fa, fb) in data.iter().zip(&mapped) {
            assert_eq!(a.predict_proba(fa).unwrap(), b.predict_proba(fb).unwrap());
        }
    }
}
