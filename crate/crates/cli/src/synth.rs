//! Seeded synthetic corpora for desk-scale audits.
//!
//! [`make_synthetic_corpus`] draws text from a shared second-order Markov
//! source and overlays every document with a repeated idiosyncratic phrase,
//! so a model trained on a document has something document-specific to
//! memorise. Documents also differ in how closely they follow the source,
//! which gives raw loss a per-document difficulty offset that the reference
//! and zlib statistics are meant to calibrate away.
//!
//! [`complementary_corpus`] builds a labelled corpus with externally supplied
//! scores in which membership is the XOR of two latent bits, one visible to
//! the loss level and one to the low-probability tail.

use memaudit_core::corpus::Document;
use memaudit_core::ngram::TokenScores;
use memaudit_core::rng::SplitMix64;
use serde::{Deserialize, Serialize};

/// Symbols available to the generator, in the order they are taken.
const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,";

pub const MAX_ALPHABET: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("alphabet_size must be between 2 and {MAX_ALPHABET}, got {0}")]
    Alphabet(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("redundancy must lie in [0, 1], got {0}")]
    Redundancy(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_docs: usize,
    pub doc_length: usize,
    pub alphabet_size: usize,
    /// Probability that a character is the source's dominant successor of
    /// its context (per-document values jitter around it).
    pub redundancy: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 1,
            n_docs: 2000,
            doc_length: 400,
            alphabet_size: 27,
            redundancy: 0.5,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), SynthError> {
        if !(2..=MAX_ALPHABET).contains(&self.alphabet_size) {
            return Err(SynthError::Alphabet(self.alphabet_size));
        }
        if self.n_docs == 0 {
            return Err(SynthError::NonPositive("n_docs"));
        }
        if self.doc_length == 0 {
            return Err(SynthError::NonPositive("doc_length"));
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return Err(SynthError::Redundancy(self.redundancy));
        }
        Ok(())
    }
}

const MAX_BRANCHING: usize = 4;
const MOTIF_LEN: std::ops::Range<usize> = 12..21;
const MOTIF_COPIES: usize = 3;
const REDUNDANCY_JITTER: f64 = 0.25;

/// Order-2 source: every pair of previous symbols has a dominant successor
/// and a few alternatives.
struct MarkovSource {
    size: usize,
    successors: Vec<Vec<usize>>,
}

impl MarkovSource {
    fn new(size: usize, rng: &mut SplitMix64) -> Self {
        let branching = MAX_BRANCHING.min(size);
        let successors = (0..size * size)
            .map(|_| {
                let mut symbols: Vec<usize> = (0..size).collect();
                rng.shuffle(&mut symbols);
                symbols.truncate(branching);
                symbols
            })
            .collect();
        Self { size, successors }
    }

    /// Dominant successor with probability `redundancy`, otherwise one of
    /// the alternatives uniformly.
    fn next(&self, prev2: usize, prev1: usize, redundancy: f64, rng: &mut SplitMix64) -> usize {
        let row = &self.successors[prev2 * self.size + prev1];
        if row.len() == 1 || rng.bernoulli(redundancy) {
            row[0]
        } else {
            row[1 + rng.below(row.len() as u64 - 1) as usize]
        }
    }

    fn walk(&self, start: (usize, usize), len: usize, redundancy: f64, rng: &mut SplitMix64) -> Vec<usize> {
        let (mut p2, mut p1) = start;
        (0..len)
            .map(|_| {
                let s = self.next(p2, p1, redundancy, rng);
                (p2, p1) = (p1, s);
                s
            })
            .collect()
    }
}

/// Generates `n_docs` documents of `doc_length` symbols.
///
/// Each document walks the shared source with its own redundancy (the
/// configured value jittered by up to 0.25) and carries one motif, a phrase
/// drawn from the same source, copied into it three times.
pub fn make_synthetic_corpus(params: &SynthParams) -> Result<Vec<Document>, SynthError> {
    params.validate()?;
    let alphabet: Vec<char> = SYMBOLS.chars().take(params.alphabet_size).collect();
    let a = alphabet.len();
    let mut rng = SplitMix64::for_stream(params.seed, "synth");
    let source = MarkovSource::new(a, &mut rng);
    let width = (params.n_docs.max(2) - 1).to_string().len();
    let random_context = |rng: &mut SplitMix64| (rng.below(a as u64) as usize, rng.below(a as u64) as usize);

    let docs = (0..params.n_docs)
        .map(|i| {
            let redundancy =
                (params.redundancy + rng.uniform(-REDUNDANCY_JITTER, REDUNDANCY_JITTER)).clamp(0.0, 1.0);
            let start = random_context(&mut rng);
            let mut symbols = source.walk(start, params.doc_length, redundancy, &mut rng);
            let len = MOTIF_LEN.start + rng.below((MOTIF_LEN.end - MOTIF_LEN.start) as u64) as usize;
            let len = len.min(params.doc_length);
            let motif_start = random_context(&mut rng);
            let motif = source.walk(motif_start, len, redundancy, &mut rng);
            for _ in 0..MOTIF_COPIES {
                let at = rng.below((params.doc_length - len + 1) as u64) as usize;
                symbols[at..at + len].copy_from_slice(&motif);
            }
            let text: String = symbols.iter().map(|&s| alphabet[s]).collect();
            Document::new(format!("doc-{i:0width$}"), text)
        })
        .collect();
    Ok(docs)
}

/// A labelled corpus with target and reference scores where membership is
/// `a XOR b`: bit `a` shifts the typical token logprob, bit `b` deepens the
/// lowest decile. Each bit alone carries no information about the label.
pub struct ComplementaryCorpus {
    pub docs: Vec<Document>,
    pub target: Vec<TokenScores>,
    pub reference: Vec<TokenScores>,
}

pub fn complementary_corpus(seed: u64, n_docs: usize, doc_length: usize) -> Result<ComplementaryCorpus, SynthError> {
    if n_docs == 0 {
        return Err(SynthError::NonPositive("n_docs"));
    }
    if doc_length < 10 {
        return Err(SynthError::NonPositive("doc_length - 9"));
    }
    let mut rng = SplitMix64::for_stream(seed, "complementary");
    let alphabet: Vec<char> = SYMBOLS.chars().take(27).collect();
    let tail = doc_length / 10;
    let width = (n_docs.max(2) - 1).to_string().len();
    let mut out = ComplementaryCorpus {
        docs: Vec::with_capacity(n_docs),
        target: Vec::with_capacity(n_docs),
        reference: Vec::with_capacity(n_docs),
    };
    for i in 0..n_docs {
        let id = format!("doc-{i:0width$}");
        let a = rng.bernoulli(0.5);
        let b = rng.bernoulli(0.5);
        let label = u8::from(a ^ b);
        let text: String = (0..doc_length)
            .map(|_| alphabet[rng.below(alphabet.len() as u64) as usize])
            .collect();

        let bulk_level = if a { 2.3 } else { 2.0 };
        let tail_level = if b { 7.5 } else { 6.0 };
        let mut target: Vec<f64> = (0..doc_length)
            .map(|j| {
                let level = if j < tail { tail_level } else { bulk_level };
                -(level * rng.uniform(0.7, 1.3))
            })
            .collect();
        rng.shuffle(&mut target);
        let reference: Vec<f64> = (0..doc_length).map(|_| -rng.uniform(1.5, 3.0)).collect();

        out.docs.push(Document::new(id.clone(), text).with_label(label));
        out.target.push(TokenScores {
            doc_id: id.clone(),
            model_id: "complementary-target".into(),
            logprobs: target,
        });
        out.reference.push(TokenScores {
            doc_id: id,
            model_id: "complementary-reference".into(),
            logprobs: reference,
        });
    }
    Ok(out)
}
