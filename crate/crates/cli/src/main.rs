use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use memaudit_cli::config::ExperimentConfig;
use memaudit_cli::synth::{complementary_corpus, make_synthetic_corpus, SynthParams};
use memaudit_cli::{report, run_experiment};
use memaudit_core::corpus::{load_corpus, write_corpus};
use memaudit_core::ngram::NGramModel;
use memaudit_core::scores::write_scores;
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "memaudit", version, about = "Membership-inference audits for language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Run the full experiment over every configured seed.
    Run(RunArgs),
    /// Score a corpus with an n-gram model and write a score file.
    ScoreDump(ScoreDumpArgs),
    /// Re-render report files from a finished run's runs.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus (JSONL).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n_docs: usize,
    #[arg(long, default_value_t = 400)]
    doc_length: usize,
    #[arg(long, default_value_t = 27)]
    alphabet_size: usize,
    #[arg(long, default_value_t = 0.5)]
    redundancy: f64,
    /// Emit a labelled corpus with XOR-structured external scores instead.
    #[arg(long, requires_all = ["target_scores", "reference_scores"])]
    complementary: bool,
    /// Target score file written with --complementary.
    #[arg(long)]
    target_scores: Option<PathBuf>,
    /// Reference score file written with --complementary.
    #[arg(long)]
    reference_scores: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// member_train,reference_train,attack_train,attack_test
    #[arg(long, value_delimiter = ',', num_args = 4)]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    lm_order: Option<usize>,
    #[arg(long)]
    lm_alpha: Option<f64>,
    #[arg(long)]
    k_percent: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<f64>>,
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long)]
    threshold_points: Option<usize>,
    #[arg(long)]
    target_scores: Option<PathBuf>,
    #[arg(long)]
    reference_scores: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ScoreDumpArgs {
    /// Documents to score.
    #[arg(long)]
    corpus: PathBuf,
    /// Saved n-gram model.
    #[arg(long, conflicts_with = "train", required_unless_present = "train")]
    model: Option<PathBuf>,
    /// Train a model on this corpus instead of loading one.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = memaudit_core::ngram::DEFAULT_ORDER)]
    order: usize,
    #[arg(long, default_value_t = memaudit_core::ngram::DEFAULT_ALPHA)]
    alpha: f64,
    /// Score file to write.
    #[arg(long)]
    out: PathBuf,
    /// Header model id (default: the model's name).
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a previous `run`.
    #[arg(long)]
    dir: PathBuf,
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let create = |path: &PathBuf| -> anyhow::Result<BufWriter<std::fs::File>> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        Ok(BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        ))
    };
    if args.complementary {
        let corpus = complementary_corpus(args.seed, args.n_docs, args.doc_length)?;
        let (t, r) = (args.target_scores.unwrap(), args.reference_scores.unwrap());
        write_corpus(create(&args.out)?, &corpus.docs)?;
        write_scores(create(&t)?, "complementary-target", &corpus.target)?;
        write_scores(create(&r)?, "complementary-reference", &corpus.reference)?;
        return Ok(());
    }
    let params = SynthParams {
        seed: args.seed,
        n_docs: args.n_docs,
        doc_length: args.doc_length,
        alphabet_size: args.alphabet_size,
        redundancy: args.redundancy,
    };
    let docs = make_synthetic_corpus(&params)?;
    let mut out = create(&args.out)?;
    write_corpus(&mut out, &docs)?;
    out.flush()?;
    Ok(())
}

fn build_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = &args.$field { config.$field = v.clone(); })*
        };
    }
    set!(corpus, output_dir, seeds, k_grid, lm_order, lm_alpha, k_percent, cv_folds, threshold_points);
    if let Some(d) = &args.dataset {
        config.dataset = Some(d.clone());
    }
    if let Some(f) = &args.fractions {
        config.fractions = f.as_slice().try_into().context("--fractions takes four values")?;
    }
    if let Some(p) = &args.target_scores {
        config.target_scores = Some(p.clone());
    }
    if let Some(p) = &args.reference_scores {
        config.reference_scores = Some(p.clone());
    }
    Ok(config)
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    if let Some(n) = args.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let config = build_config(&args)?;
    let summary = run_experiment(&config)?;
    print!("{}", report::render_table(&summary)?);
    Ok(())
}

fn score_dump(args: ScoreDumpArgs) -> anyhow::Result<()> {
    let model = match (&args.model, &args.train) {
        (Some(path), _) => NGramModel::load_from(path)?,
        (None, Some(train)) => NGramModel::train(&load_corpus(train, false)?, args.order, args.alpha)?,
        (None, None) => bail!("either --model or --train is required"),
    };
    let docs = load_corpus(&args.corpus, false)?;
    let scores = docs
        .par_iter()
        .map(|d| model.score_document(d).with_context(|| format!("document {:?}", d.id)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let model_id = args.model_id.unwrap_or_else(|| model.name().to_string());
    let file = std::fs::File::create(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let mut out = BufWriter::new(file);
    write_scores(&mut out, &model_id, &scores)?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (stage, result) = match cli.command {
        Command::Synth(a) => ("synth", synth(a)),
        Command::Run(a) => ("run", run(a)),
        Command::ScoreDump(a) => ("score-dump", score_dump(a)),
        Command::Report(a) => ("report", report::rerender(&a.dir).map(|_| ()).map_err(Into::into)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("memaudit {stage}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
