//! Grid search with stratified k-fold cross-validation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_rows, to_matrix, GbdtError, GbdtParams, Result, Row};
use crate::eval::auc_from_scores;
use crate::features::AttackFeatures;
use crate::rng::SplitMix64;

/// Cartesian product of candidate values, expanded with `n_trees` outermost
/// and `min_child_weight` innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamGrid {
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub min_child_weight: Vec<f64>,
}

impl Default for ParamGrid {
    fn default() -> Self {
        Self {
            n_trees: vec![50, 100, 200],
            max_depth: vec![2, 3, 4],
            learning_rate: vec![0.1, 0.3],
            lambda: vec![1.0],
            gamma: vec![0.0],
            min_child_weight: vec![1.0],
        }
    }
}

impl ParamGrid {
    pub fn single(params: &GbdtParams) -> Self {
        Self {
            n_trees: vec![params.n_trees],
            max_depth: vec![params.max_depth],
            learning_rate: vec![params.learning_rate],
            lambda: vec![params.lambda],
            gamma: vec![params.gamma],
            min_child_weight: vec![params.min_child_weight],
        }
    }

    pub fn expand(&self, seed: u64) -> Vec<GbdtParams> {
        let mut out = Vec::new();
        for &n_trees in &self.n_trees {
            for &max_depth in &self.max_depth {
                for &learning_rate in &self.learning_rate {
                    for &lambda in &self.lambda {
                        for &gamma in &self.gamma {
                            for &min_child_weight in &self.min_child_weight {
                                out.push(GbdtParams {
                                    n_trees,
                                    max_depth,
                                    learning_rate,
                                    lambda,
                                    gamma,
                                    min_child_weight,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Fold index for every example. Each class is shuffled separately and dealt
/// round-robin, so fold class counts differ by at most one.
pub fn stratified_folds(labels: &[u8], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::for_stream(seed, "cv-folds");
    let mut assignment = vec![0; labels.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut idx);
        for (k, i) in idx.into_iter().enumerate() {
            assignment[i] = k % folds;
        }
    }
    assignment
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub params: GbdtParams,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: GbdtParams,
    pub best_index: usize,
    pub table: Vec<CvRow>,
}

fn cv_row(rows: &[Row], labels: &[u8], fold_of: &[usize], folds: usize, params: &GbdtParams) -> Result<CvRow> {
    let mut fold_aucs = Vec::with_capacity(folds);
    for fold in 0..folds {
        let (mut tr_rows, mut tr_labels, mut va_rows, mut va_labels) = (vec![], vec![], vec![], vec![]);
        for i in 0..rows.len() {
            if fold_of[i] == fold {
                va_rows.push(rows[i]);
                va_labels.push(labels[i]);
            } else {
                tr_rows.push(rows[i]);
                tr_labels.push(labels[i]);
            }
        }
        let (model, _) = fit_rows(&tr_rows, &tr_labels, params)?;
        let scores: Vec<f64> = va_rows.iter().map(|r| model.predict_margin_row(r)).collect();
        let auc = auc_from_scores(&scores, &va_labels).expect("stratified folds hold both classes");
        fold_aucs.push(auc);
    }
    let mean_auc = fold_aucs.iter().sum::<f64>() / folds as f64;
    let var = fold_aucs.iter().map(|a| (a - mean_auc).powi(2)).sum::<f64>() / (folds.max(2) - 1) as f64;
    Ok(CvRow {
        params: params.clone(),
        fold_aucs,
        mean_auc,
        std_auc: var.sqrt(),
    })
}

/// Scores every grid entry by mean validation AUC over stratified folds.
///
/// The best entry has the highest mean AUC; exact ties prefer fewer trees,
/// then shallower trees, then earlier grid position. Grid entries are
/// evaluated in parallel; results do not depend on the thread count.
pub fn grid_search_cv(
    features: &[AttackFeatures],
    grid: &[GbdtParams],
    folds: usize,
    seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(GbdtError::EmptyGrid);
    }
    if folds < 2 {
        return Err(GbdtError::BadParams(format!("need at least 2 folds, got {folds}")));
    }
    for params in grid {
        params.validate()?;
    }
    let (rows, labels) = to_matrix(features)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos < folds || n_neg < folds {
        return Err(GbdtError::TooFewForFolds { folds, n_pos, n_neg });
    }
    let fold_of = stratified_folds(&labels, folds, seed);

    let table = grid
        .par_iter()
        .map(|params| cv_row(&rows, &labels, &fold_of, folds, params))
        .collect::<Result<Vec<_>>>()?;

    let mut best_index = 0;
    for (i, row) in table.iter().enumerate().skip(1) {
        let best = &table[best_index];
        let better = row.mean_auc > best.mean_auc
            || (row.mean_auc == best.mean_auc
                && (row.params.n_trees, row.params.max_depth) < (best.params.n_trees, best.params.max_depth));
        if better {
            best_index = i;
        }
    }
    Ok(CvResult {
        best: table[best_index].params.clone(),
        best_index,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn noisy_linear(seed: u64, n: usize) -> Vec<AttackFeatures> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let shift = if label == 1 { 0.8 } else { 0.0 };
                feat(i, [rng.normal() + shift, rng.normal(), rng.normal(), rng.normal()], label)
            })
            .collect()
    }

    #[test]
    fn default_grid_has_eighteen_entries() {
        let grid = ParamGrid::default().expand(0);
        assert_eq!(grid.len(), 18);
        assert_eq!((grid[0].n_trees, grid[0].max_depth, grid[0].learning_rate), (50, 2, 0.1));
        assert_eq!((grid[17].n_trees, grid[17].max_depth, grid[17].learning_rate), (200, 4, 0.3));
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<u8> = (0..53).map(|i| u8::from(i % 3 == 0)).collect();
        let folds = stratified_folds(&labels, 5, 1);
        for class in [0u8, 1] {
            let counts: Vec<usize> = (0..5)
                .map(|f| (0..labels.len()).filter(|&i| folds[i] == f && labels[i] == class).count())
                .collect();
            let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(max - min <= 1, "{counts:?}");
        }
    }

    #[test]
    fn singleton_grid_returns_that_set() {
        let data = noisy_linear(1, 60);
        let params = GbdtParams { n_trees: 7, max_depth: 2, ..Default::default() };
        let result = grid_search_cv(&data, &ParamGrid::single(&params).expand(0), 5, 3).unwrap();
        assert_eq!(result.best, GbdtParams { seed: 0, ..params });
        assert_eq!(result.table.len(), 1);
        assert_eq!(result.table[0].fold_aucs.len(), 5);
    }

    #[test]
    fn deterministic_table() {
        let data = noisy_linear(2, 80);
        let grid = ParamGrid { n_trees: vec![5, 10], max_depth: vec![1, 2], ..Default::default() }.expand(4);
        let a = grid_search_cv(&data, &grid, 5, 11).unwrap();
        let b = grid_search_cv(&data, &grid, 5, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_prefer_smaller_models() {
        // Constant features: every configuration predicts the base rate.
        let data: Vec<AttackFeatures> = (0..20).map(|i| feat(i, [1.0; 4], (i % 2) as u8)).collect();
        let grid = ParamGrid { n_trees: vec![20, 5], max_depth: vec![3, 1], ..Default::default() }.expand(0);
        let result = grid_search_cv(&data, &grid, 5, 0).unwrap();
        assert_eq!((result.best.n_trees, result.best.max_depth), (5, 1));
    }

    #[test]
    fn errors() {
        let data = noisy_linear(3, 40);
        assert!(matches!(grid_search_cv(&data, &[], 5, 0), Err(GbdtError::EmptyGrid)));
        let few = noisy_linear(3, 6);
        assert!(matches!(
            grid_search_cv(&few, &ParamGrid::default().expand(0), 5, 0),
            Err(GbdtError::TooFewForFolds { .. })
        ));
    }
}
