//! Membership-inference auditing for language models.
//!
//! The crate computes four per-document attack statistics from per-token
//! log-probabilities (LOSS, reference-calibrated loss, Min-k% and the
//! zlib-normalised loss), combines them with a gradient-boosted tree ensemble,
//! and evaluates every attack with AUC-ROC and threshold metrics.
//!
//! A small character n-gram model stands in for the audited language model so
//! that the whole pipeline runs offline; externally computed scores can be
//! ingested through [`scores`] instead.

pub mod compress;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod gbdt;
pub mod ngram;
pub mod rng;
pub mod scores;

pub use compress::{deflate_size, CompressedSize, CompressionParams};
pub use corpus::{
    load_corpus, make_labeled_splits, make_splits, tokenize, Document, LabeledId, Partition,
    SplitPlan, TokenSeq,
};
pub use eval::{
    aggregate_runs, auc_roc, confusion_metrics, single_attack_scores, Aggregate, Attack,
    MetricsReport, ScoredExample,
};
pub use features::{build_features, AttackFeatures, NUM_FEATURES};
pub use gbdt::{grid_search_cv, GbdtModel, GbdtParams, ParamGrid};
pub use ngram::{NGramModel, TokenScores};
pub use rng::SplitMix64;
pub use scores::{load_scores, ScoreFile};
