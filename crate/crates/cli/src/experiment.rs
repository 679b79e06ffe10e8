//! The end-to-end audit: split, score, featurize, tune, fit, evaluate, per seed.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::{info, warn};
use memaudit_core::corpus::{load_corpus, make_labeled_splits, make_splits, Document, LabeledId, Partition, SplitPlan};
use memaudit_core::eval::{
    auc_from_scores, best_balanced_threshold, confusion_metrics, single_attack_scores, sweep_mink,
    threshold_sweep, Attack, MetricsReport, ScoredExample, SweepPoint,
};
use memaudit_core::features::{build_features, write_features_csv, AttackFeatures};
use memaudit_core::gbdt::{grid_search_cv, proba_from_margin, CvResult, GbdtModel, GbdtParams};
use memaudit_core::ngram::{NGramModel, TokenScores};
use memaudit_core::scores::{load_scores, ScoreFile};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::report::{write_reports, RunSummary};

pub const ENSEMBLE: &str = "em_mias";

/// Pipeline stage names used in error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Corpus,
    Scores,
    Split,
    LanguageModel,
    Features,
    GridSearch,
    Fit,
    Evaluate,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Corpus => "corpus",
            Stage::Scores => "scores",
            Stage::Split => "split",
            Stage::LanguageModel => "language-model",
            Stage::Features => "features",
            Stage::GridSearch => "grid-search",
            Stage::Fit => "fit",
            Stage::Evaluate => "evaluate",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug)]
pub struct ExperimentError {
    pub stage: Stage,
    pub seed: Option<u64>,
    pub doc: Option<String>,
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed", self.stage)?;
        if let Some(seed) = self.seed {
            write!(f, " (seed {seed})")?;
        }
        if let Some(doc) = &self.doc {
            write!(f, " on document {doc:?}")?;
        }
        write!(f, ": {}", self.source)
    }
}

impl std::error::Error for ExperimentError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(self.source.as_ref())
    }
}

impl ExperimentError {
    pub fn new(stage: Stage, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self {
            stage,
            seed: None,
            doc: None,
            source: source.into(),
        }
    }

    fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn doc(mut self, doc: &str) -> Self {
        self.doc = Some(doc.to_string());
        self
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
    fn at(self, stage: Stage, seed: u64) -> Result<T>;
    fn on_doc(self, stage: Stage, seed: u64, doc: &str) -> Result<T>;
}

impl<T, E: Into<Box<dyn std::error::Error + Send + Sync>>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| ExperimentError::new(stage, e))
    }

    fn at(self, stage: Stage, seed: u64) -> Result<T> {
        self.map_err(|e| ExperimentError::new(stage, e).seed(seed))
    }

    fn on_doc(self, stage: Stage, seed: u64, doc: &str) -> Result<T> {
        self.map_err(|e| ExperimentError::new(stage, e).seed(seed).doc(doc))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSetSizes {
    pub train_members: usize,
    pub train_non_members: usize,
    pub test_members: usize,
    pub test_non_members: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweeps {
    /// Min-k% test AUC per k.
    pub mink_auc_by_k: Vec<SweepPoint>,
    /// Test accuracy per decision threshold on the oriented score (−f_loss).
    pub loss_accuracy_by_threshold: Vec<SweepPoint>,
    /// Test accuracy per decision threshold on the oriented score (−f_zlib).
    pub zlib_accuracy_by_threshold: Vec<SweepPoint>,
}

/// Everything recorded about one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub attack_sets: AttackSetSizes,
    pub chosen_params: GbdtParams,
    pub cv_mean_auc: f64,
    /// The four single attacks in fixed order, then the ensemble.
    pub results: Vec<AttackResult>,
    pub sweeps: Sweeps,
}

impl SeedRun {
    pub fn result(&self, attack: &str) -> Option<&MetricsReport> {
        self.results.iter().find(|r| r.attack == attack).map(|r| &r.metrics)
    }
}

/// Where per-token scores come from.
enum ScoreSource {
    Internal,
    External { target: ScoreFile, reference: ScoreFile },
}

/// Per-seed artifacts held in memory until written.
struct SeedArtifacts {
    plan: SplitPlan,
    models: Option<(NGramModel, NGramModel)>,
    train: Vec<AttackFeatures>,
    test: Vec<AttackFeatures>,
    cv: CvResult,
    ensemble: GbdtModel,
}

/// Label string for the `params` column of the summary table.
pub fn params_label(config: &ExperimentConfig, external_target: Option<&str>) -> String {
    match external_target {
        Some(id) => id.to_string(),
        None => format!("ngram-o{}-a{}", config.lm_order, config.lm_alpha),
    }
}

/// Runs every seed of `config`, writes per-seed artifacts under
/// `output_dir/seed-N/` and the reports at the top level.
///
/// A seed that fails leaves its partial output in `output_dir/quarantine/`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate().stage(Stage::Config)?;
    let docs = load_corpus(&config.corpus, false).stage(Stage::Corpus)?;
    info!("loaded {} documents from {}", docs.len(), config.corpus.display());

    let source = match (&config.target_scores, &config.reference_scores) {
        (Some(t), Some(r)) => ScoreSource::External {
            target: load_scores(t).stage(Stage::Scores)?,
            reference: load_scores(r).stage(Stage::Scores)?,
        },
        _ => ScoreSource::Internal,
    };
    let external_id = match &source {
        ScoreSource::External { target, .. } => Some(target.model_id().to_string()),
        ScoreSource::Internal => None,
    };

    std::fs::create_dir_all(&config.output_dir).stage(Stage::Output)?;
    let runs = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, &docs, &source, seed))
        .collect::<Result<Vec<_>>>()?;

    let summary = RunSummary {
        dataset: config.dataset_name(),
        params: params_label(config, external_id.as_deref()),
        config: config.clone(),
        runs,
    };
    write_reports(&config.output_dir, &summary).stage(Stage::Output)?;
    Ok(summary)
}

fn run_seed(config: &ExperimentConfig, docs: &[Document], source: &ScoreSource, seed: u64) -> Result<SeedRun> {
    info!("seed {seed}: start");
    let staging = config.output_dir.join(format!("seed-{seed}.partial"));
    let outcome = compute_seed(config, docs, source, seed);
    let written = match &outcome {
        Ok((run, artifacts)) => write_seed(&staging, run, artifacts),
        Err(_) => Ok(()),
    };
    let final_dir = config.output_dir.join(format!("seed-{seed}"));
    match (outcome, written) {
        (Ok((run, _)), Ok(())) => {
            replace_dir(&staging, &final_dir).map_err(|e| ExperimentError::new(Stage::Output, e).seed(seed))?;
            info!("seed {seed}: done");
            Ok(run)
        }
        (Err(e), _) => {
            quarantine(config, &staging, seed, &e.to_string());
            Err(e)
        }
        (Ok(_), Err(e)) => {
            let e = ExperimentError::new(Stage::Output, e).seed(seed);
            quarantine(config, &staging, seed, &e.to_string());
            Err(e)
        }
    }
}

fn replace_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    if to.exists() {
        std::fs::remove_dir_all(to)?;
    }
    std::fs::rename(from, to)
}

fn quarantine(config: &ExperimentConfig, staging: &Path, seed: u64, message: &str) {
    let dir = config.output_dir.join("quarantine").join(format!("seed-{seed}"));
    let moved = std::fs::create_dir_all(&dir)
        .and_then(|_| {
            if staging.exists() {
                std::fs::remove_dir_all(&dir)?;
                std::fs::rename(staging, &dir)?;
            }
            std::fs::create_dir_all(&dir)
        })
        .and_then(|_| std::fs::write(dir.join("error.txt"), format!("{message}\n")));
    if let Err(e) = moved {
        warn!("could not quarantine seed {seed}: {e}");
    }
}

fn compute_seed(
    config: &ExperimentConfig,
    docs: &[Document],
    source: &ScoreSource,
    seed: u64,
) -> Result<(SeedRun, SeedArtifacts)> {
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();

    let plan = match source {
        ScoreSource::Internal => make_splits(docs, seed, config.fractions),
        ScoreSource::External { .. } => make_labeled_splits(docs, seed),
    }
    .at(Stage::Split, seed)?;

    let models = match source {
        ScoreSource::Internal => {
            let train = |partition: Partition, name: &str| {
                let part: Vec<Document> = plan
                    .ids_in(partition)
                    .into_iter()
                    .map(|id| by_id[id].clone())
                    .collect();
                NGramModel::train(&part, config.lm_order, config.lm_alpha).map(|m| m.with_name(name))
            };
            let target = train(Partition::MemberTrain, "target").at(Stage::LanguageModel, seed)?;
            let reference = train(Partition::ReferenceTrain, "reference").at(Stage::LanguageModel, seed)?;
            Some((target, reference))
        }
        ScoreSource::External { .. } => None,
    };

    let featurize = |set: &[LabeledId]| -> Result<(Vec<AttackFeatures>, Vec<TokenScores>)> {
        let rows = set
            .par_iter()
            .map(|e| {
                let doc = Document {
                    label: Some(e.label),
                    ..(*by_id[e.id.as_str()]).clone()
                };
                let (target, reference) = match (&models, source) {
                    (Some((t, r)), _) => (
                        t.score_document(&doc).on_doc(Stage::LanguageModel, seed, &e.id)?,
                        r.score_document(&doc).on_doc(Stage::LanguageModel, seed, &e.id)?,
                    ),
                    (None, ScoreSource::External { target, reference }) => (
                        target.get(&doc.id).on_doc(Stage::Scores, seed, &e.id)?.clone(),
                        reference.get(&doc.id).on_doc(Stage::Scores, seed, &e.id)?.clone(),
                    ),
                    (None, ScoreSource::Internal) => unreachable!("internal runs always train models"),
                };
                let features = build_features(&doc, &target, &reference, config.k_percent)
                    .on_doc(Stage::Features, seed, &e.id)?;
                Ok((features, target))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(rows.into_iter().unzip())
    };
    let (train, _) = featurize(&plan.attack_train)?;
    let (test, test_scores) = featurize(&plan.attack_test)?;

    let grid = config.param_grid.expand(seed);
    let cv = grid_search_cv(&train, &grid, config.cv_folds, seed).at(Stage::GridSearch, seed)?;
    info!("seed {seed}: chose {:?} (cv auc {:.4})", cv.best, cv.table[cv.best_index].mean_auc);
    let ensemble = GbdtModel::fit(&train, &cv.best).at(Stage::Fit, seed)?;

    let mut results = Vec::with_capacity(Attack::ALL.len() + 1);
    let mut oriented = HashMap::new();
    for attack in Attack::ALL {
        let train_scores = single_attack_scores(&train, attack).at(Stage::Evaluate, seed)?;
        let threshold = best_balanced_threshold(&train_scores).at(Stage::Evaluate, seed)?;
        let test_scores = single_attack_scores(&test, attack).at(Stage::Evaluate, seed)?;
        let metrics = confusion_metrics(&test_scores, threshold).at(Stage::Evaluate, seed)?;
        results.push(AttackResult {
            attack: attack.name().to_string(),
            metrics,
        });
        oriented.insert(attack, test_scores);
    }
    results.push(AttackResult {
        attack: ENSEMBLE.to_string(),
        metrics: ensemble_metrics(&ensemble, &test).at(Stage::Evaluate, seed)?,
    });

    let labelled: Vec<(&TokenScores, u8)> = test_scores
        .iter()
        .zip(&test)
        .map(|(s, f)| (s, f.label.expect("attack examples are labelled")))
        .collect();
    let sweeps = Sweeps {
        mink_auc_by_k: sweep_mink(&labelled, &config.k_grid).at(Stage::Evaluate, seed)?,
        loss_accuracy_by_threshold: threshold_sweep(&oriented[&Attack::Loss], config.threshold_points)
            .at(Stage::Evaluate, seed)?,
        zlib_accuracy_by_threshold: threshold_sweep(&oriented[&Attack::Zlib], config.threshold_points)
            .at(Stage::Evaluate, seed)?,
    };

    let count = |set: &[LabeledId], label: u8| set.iter().filter(|e| e.label == label).count();
    let run = SeedRun {
        seed,
        attack_sets: AttackSetSizes {
            train_members: count(&plan.attack_train, 1),
            train_non_members: count(&plan.attack_train, 0),
            test_members: count(&plan.attack_test, 1),
            test_non_members: count(&plan.attack_test, 0),
        },
        chosen_params: cv.best.clone(),
        cv_mean_auc: cv.table[cv.best_index].mean_auc,
        results,
        sweeps,
    };
    let artifacts = SeedArtifacts {
        plan,
        models,
        train,
        test,
        cv,
        ensemble,
    };
    Ok((run, artifacts))
}

/// Ensemble metrics on held-out features: the decision rule is
/// `predict_proba >= 0.5`, the AUC is computed on margins.
pub fn ensemble_metrics(
    model: &GbdtModel,
    features: &[AttackFeatures],
) -> Result<MetricsReport, Box<dyn std::error::Error + Send + Sync>> {
    let mut margins = Vec::with_capacity(features.len());
    let mut by_proba = Vec::with_capacity(features.len());
    let mut labels = Vec::with_capacity(features.len());
    for f in features {
        let margin = model.predict_margin(f)?;
        let label = f.label.ok_or_else(|| format!("example {:?} has no label", f.doc_id))?;
        margins.push(margin);
        labels.push(label);
        by_proba.push(ScoredExample::new(f.doc_id.clone(), proba_from_margin(margin), label));
    }
    let mut metrics = confusion_metrics(&by_proba, 0.5)?;
    metrics.auc = auc_from_scores(&margins, &labels)?;
    Ok(metrics)
}

fn write_seed(dir: &Path, run: &SeedRun, artifacts: &SeedArtifacts) -> std::io::Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    let file = |name: &str| -> PathBuf { dir.join(name) };
    std::fs::write(file("split_plan.json"), artifacts.plan.to_json() + "\n")?;
    if let Some((target, reference)) = &artifacts.models {
        std::fs::write(file("target_lm.json"), target.save())?;
        std::fs::write(file("reference_lm.json"), reference.save())?;
    }
    std::fs::write(file("ensemble.json"), artifacts.ensemble.to_json() + "\n")?;
    for (name, features) in [("features_train.csv", &artifacts.train), ("features_test.csv", &artifacts.test)] {
        let out = std::io::BufWriter::new(std::fs::File::create(file(name))?);
        write_features_csv(out, features).map_err(std::io::Error::other)?;
    }
    let mut table = String::from("n_trees,max_depth,learning_rate,lambda,gamma,min_child_weight,mean_auc,std_auc,selected\n");
    for (i, row) in artifacts.cv.table.iter().enumerate() {
        let p = &row.params;
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.n_trees,
            p.max_depth,
            p.learning_rate,
            p.lambda,
            p.gamma,
            p.min_child_weight,
            row.mean_auc,
            row.std_auc,
            u8::from(i == artifacts.cv.best_index)
        ));
    }
    std::fs::write(file("cv_table.csv"), table)?;
    let json = serde_json::to_string_pretty(run).map_err(std::io::Error::other)?;
    std::fs::write(file("run.json"), json + "\n")
}
