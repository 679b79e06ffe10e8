//! Report rendering. Every report file is a pure function of [`RunSummary`],
//! which is itself stored as `runs.json` so reports can be re-rendered.

use std::path::Path;

use memaudit_core::compress::{compression_params, CompressionParams};
use memaudit_core::eval::{aggregate_runs, Aggregate, Attack};
use memaudit_core::features::FEATURE_NAMES;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::experiment::{AttackSetSizes, SeedRun, Sweeps, ENSEMBLE};

pub const RUNS_FILE: &str = "runs.json";
pub const TABLE_COLUMNS: [&str; 7] = ["dataset", "params", "loss", "ref", "mink", "zlib", "em_mias"];

const SWEEP_NOTE: &str = "AUC has no decision threshold. The Min-k% sweep varies k and reports test AUC; \
the LOSS and zlib sweeps vary the decision threshold on the oriented score and report test accuracy.";
const THRESHOLD_NOTE: &str = "Single attacks predict member iff the oriented score is at least the threshold \
that maximises balanced accuracy on attack_train. The ensemble predicts member iff predict_proba >= 0.5; \
its AUC is computed on the margin.";
const PRECISION_NOTE: &str = "Precision with no predicted positives is reported as 0 with precision_defined = false.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub params: String,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: std::path::PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("run summary has no runs")]
    NoRuns,
    #[error("attack {0} missing from a run")]
    MissingAttack(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

type Result<T, E = ReportError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub attack: String,
    pub auc: Aggregate,
    pub accuracy: Aggregate,
    pub precision: Aggregate,
    pub recall: Aggregate,
    pub f1: Aggregate,
}

#[derive(Debug, Serialize)]
struct Toolkit {
    name: &'static str,
    version: &'static str,
}

#[derive(Debug, Serialize)]
struct LanguageModelInfo {
    source: &'static str,
    order: Option<usize>,
    alpha: Option<f64>,
    tokenizer: &'static str,
    target_scores: Option<String>,
    reference_scores: Option<String>,
}

#[derive(Debug, Serialize)]
struct SeedEntry<'a> {
    seed: u64,
    split_seed: u64,
    attack_sets: &'a AttackSetSizes,
    chosen_params: &'a memaudit_core::gbdt::GbdtParams,
    cv_mean_auc: f64,
    metrics: serde_json::Map<String, serde_json::Value>,
    sweeps: &'a Sweeps,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    toolkit: Toolkit,
    dataset: &'a str,
    params: &'a str,
    config: &'a ExperimentConfig,
    compression: CompressionParams,
    language_model: LanguageModelInfo,
    feature_conventions: serde_json::Value,
    notes: serde_json::Value,
    summary: Vec<MetricSummary>,
    seeds: Vec<SeedEntry<'a>>,
}

pub fn attack_columns() -> Vec<&'static str> {
    Attack::ALL.iter().map(|a| a.name()).chain(std::iter::once(ENSEMBLE)).collect()
}

/// Mean and spread of every metric of every attack over the seeds.
pub fn summarize(summary: &RunSummary) -> Result<Vec<MetricSummary>> {
    if summary.runs.is_empty() {
        return Err(ReportError::NoRuns);
    }
    attack_columns()
        .into_iter()
        .map(|attack| {
            let reports = summary
                .runs
                .iter()
                .map(|r| r.result(attack).ok_or_else(|| ReportError::MissingAttack(attack.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let agg = |f: fn(&memaudit_core::eval::MetricsReport) -> f64| {
                let values: Vec<f64> = reports.iter().map(|m| f(m)).collect();
                aggregate_runs(&values).expect("at least one run")
            };
            Ok(MetricSummary {
                attack: attack.to_string(),
                auc: agg(|m| m.auc),
                accuracy: agg(|m| m.accuracy),
                precision: agg(|m| m.precision),
                recall: agg(|m| m.recall),
                f1: agg(|m| m.f1),
            })
        })
        .collect()
}

/// One-row table in the summary layout: AUC per attack as `m±s`.
pub fn render_table(summary: &RunSummary) -> Result<String> {
    let stats = summarize(summary)?;
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(TABLE_COLUMNS)?;
    let mut row = vec![summary.dataset.clone(), summary.params.clone()];
    row.extend(stats.iter().map(|s| s.auc.display()));
    out.write_record(&row)?;
    let bytes = out.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Per-seed metrics, one row per (seed, attack).
pub fn render_metrics(summary: &RunSummary) -> Result<String> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record([
        "seed",
        "attack",
        "auc",
        "accuracy",
        "precision",
        "precision_defined",
        "recall",
        "f1",
        "threshold",
        "tp",
        "fp",
        "tn",
        "fn",
    ])?;
    for run in &summary.runs {
        for r in &run.results {
            let m = &r.metrics;
            out.write_record([
                run.seed.to_string(),
                r.attack.clone(),
                m.auc.to_string(),
                m.accuracy.to_string(),
                m.precision.to_string(),
                m.precision_defined.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                m.threshold.to_string(),
                m.tp.to_string(),
                m.fp.to_string(),
                m.tn.to_string(),
                m.fn_.to_string(),
            ])?;
        }
    }
    let bytes = out.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_json(summary: &RunSummary) -> Result<String> {
    let config = &summary.config;
    let external = config.is_external();
    let path_string = |p: &Option<std::path::PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let seeds = summary
        .runs
        .iter()
        .map(|run| SeedEntry {
            seed: run.seed,
            split_seed: run.seed,
            attack_sets: &run.attack_sets,
            chosen_params: &run.chosen_params,
            cv_mean_auc: run.cv_mean_auc,
            metrics: run
                .results
                .iter()
                .map(|r| (r.attack.clone(), serde_json::to_value(&r.metrics).expect("metrics serialize")))
                .collect(),
            sweeps: &run.sweeps,
        })
        .collect();
    let report = Report {
        toolkit: Toolkit {
            name: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
        },
        dataset: &summary.dataset,
        params: &summary.params,
        config,
        compression: compression_params(),
        language_model: LanguageModelInfo {
            source: if external { "external score files" } else { "add-alpha character n-gram" },
            order: (!external).then_some(config.lm_order),
            alpha: (!external).then_some(config.lm_alpha),
            tokenizer: if external { "as supplied by the score files" } else { "unicode scalar values" },
            target_scores: path_string(&config.target_scores),
            reference_scores: path_string(&config.reference_scores),
        },
        feature_conventions: json!({
            "order": FEATURE_NAMES,
            "f_loss": "mean per-token negative log-likelihood, nats/token",
            "f_ref": "f_loss(target) - f_loss(reference), nats/token",
            "f_mink": "mean log-probability of the lowest max(1, floor(T*k/100)) tokens, nats/token",
            "f_zlib": "total negative log-likelihood / zlib-compressed text bytes, nats/byte",
            "k_percent": config.k_percent,
        }),
        notes: json!({
            "sweeps": SWEEP_NOTE,
            "decision_rules": THRESHOLD_NOTE,
            "precision": PRECISION_NOTE,
        }),
        summary: summarize(summary)?,
        seeds,
    };
    let value = serde_json::to_value(&report).map_err(|source| ReportError::Json {
        path: "report.json".into(),
        source,
    })?;
    Ok(serde_json::to_string_pretty(&value).expect("report serializes") + "\n")
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| ReportError::Io { path, source })
}

/// Writes `runs.json`, `report.json`, `report.csv` and `metrics.csv`.
pub fn write_reports(dir: &Path, summary: &RunSummary) -> Result<()> {
    let runs = serde_json::to_string_pretty(summary).map_err(|source| ReportError::Json {
        path: dir.join(RUNS_FILE),
        source,
    })?;
    write(dir, RUNS_FILE, &(runs + "\n"))?;
    write(dir, "report.json", &render_json(summary)?)?;
    write(dir, "report.csv", &render_table(summary)?)?;
    write(dir, "metrics.csv", &render_metrics(summary)?)
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(RUNS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json { path, source })
}

/// Re-renders the report files from a stored `runs.json`.
pub fn rerender(dir: &Path) -> Result<RunSummary> {
    let summary = load_summary(dir)?;
    write(dir, "report.json", &render_json(&summary)?)?;
    write(dir, "report.csv", &render_table(&summary)?)?;
    write(dir, "metrics.csv", &render_metrics(&summary)?)?;
    Ok(summary)
}
