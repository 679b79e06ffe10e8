//! Experiment configuration, loadable from JSON and overridable by flags.

use std::path::{Path, PathBuf};

use memaudit_core::features::DEFAULT_K_PERCENT;
use memaudit_core::gbdt::ParamGrid;
use memaudit_core::ngram::{DEFAULT_ALPHA, DEFAULT_ORDER};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_FRACTIONS: [f64; 4] = [0.4, 0.2, 0.2, 0.2];
pub const DEFAULT_K_GRID: [f64; 7] = [5.0, 10.0, 20.0, 30.0, 50.0, 70.0, 100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    /// Dataset column of the summary table; defaults to the corpus file stem.
    pub dataset: Option<String>,
    /// Not part of the recorded provenance, so that the same experiment
    /// written to two places yields identical reports.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// (member_train, reference_train, attack_train, attack_test).
    pub fractions: [f64; 4],
    pub lm_order: usize,
    pub lm_alpha: f64,
    pub k_percent: f64,
    pub k_grid: Vec<f64>,
    pub param_grid: ParamGrid,
    pub cv_folds: usize,
    pub threshold_points: usize,
    /// Externally computed target-model scores. Requires `reference_scores`
    /// and a corpus with membership labels.
    pub target_scores: Option<PathBuf>,
    pub reference_scores: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            dataset: None,
            output_dir: PathBuf::from("memaudit-out"),
            seeds: DEFAULT_SEEDS.to_vec(),
            fractions: DEFAULT_FRACTIONS,
            lm_order: DEFAULT_ORDER,
            lm_alpha: DEFAULT_ALPHA,
            k_percent: DEFAULT_K_PERCENT,
            k_grid: DEFAULT_K_GRID.to_vec(),
            param_grid: ParamGrid::default(),
            cv_folds: 5,
            threshold_points: 21,
            target_scores: None,
            reference_scores: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        // output_dir is never serialized, so read it back explicitly.
        if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(&text) {
            if let Some(dir) = map.get("output_dir").and_then(|v| v.as_str()) {
                config.output_dir = PathBuf::from(dir);
            }
        }
        Ok(config)
    }

    pub fn is_external(&self) -> bool {
        self.target_scores.is_some()
    }

    pub fn dataset_name(&self) -> String {
        self.dataset.clone().unwrap_or_else(|| {
            self.corpus
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".to_string())
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.corpus.as_os_str().is_empty() {
            return invalid("no corpus path given".into());
        }
        if self.seeds.is_empty() {
            return invalid("seed list is empty".into());
        }
        if self.target_scores.is_some() != self.reference_scores.is_some() {
            return invalid("external scores must be given for both the target and the reference model".into());
        }
        if self.lm_order == 0 {
            return invalid("lm_order must be at least 1".into());
        }
        if !(self.lm_alpha.is_finite() && self.lm_alpha > 0.0) {
            return invalid(format!("lm_alpha {} must be positive", self.lm_alpha));
        }
        for &k in std::iter::once(&self.k_percent).chain(&self.k_grid) {
            if !(k > 0.0 && k <= 100.0) {
                return invalid(format!("k = {k} is outside (0, 100]"));
            }
        }
        if self.k_grid.is_empty() {
            return invalid("k grid is empty".into());
        }
        if self.cv_folds < 2 {
            return invalid(format!("cv_folds {} must be at least 2", self.cv_folds));
        }
        if self.threshold_points == 0 {
            return invalid("threshold_points must be positive".into());
        }
        if self.param_grid.expand(0).is_empty() {
            return invalid("GBDT parameter grid is empty".into());
        }
        Ok(())
    }
}
