//! Fixed-order character n-gram language model with add-α smoothing.
//!
//! `P(t | c) = (count(c, t) + α) / (total(c) + α · |V ∪ {UNK}|)`, where the
//! context `c` is always the previous `order − 1` tokens, left-padded with
//! begin-of-sequence sentinels. There is no backoff: an unseen context yields
//! the uniform distribution over `V ∪ {UNK}`.
//!
//! # Model file
//!
//! Models serialize to JSON (see [`NGramModel::save`]):
//!
//! ```json
//! {"format_version":1,"name":"target","order":2,"alpha":0.1,"vocab":"ab",
//!  "contexts":[{"bos":1,"ctx":"","total":1,"next":{"a":1}},
//!              {"bos":0,"ctx":"a","total":2,"next":{"a":1,"b":1}}]}
//! ```
//!
//! `vocab` lists the training characters in code-point order. Each context
//! entry has `bos` sentinels followed by the characters of `ctx`
//! (`bos + len(ctx) = order − 1`), its `total` count, and the per-token counts
//! in `next`. Contexts are sorted, so equal models produce equal bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, CorpusError, Document, TokenSeq};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_ORDER: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.1;

const BOS: u32 = u32::MAX;
const UNK: u32 = u32::MAX - 1;

#[derive(Debug, thiserror::Error)]
pub enum NGramError {
    #[error("cannot train on an empty document set")]
    NoDocuments,
    #[error("order must be at least 1, got {0}")]
    BadOrder(usize),
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("cannot score an empty token sequence for {0:?}")]
    EmptySequence(String),
    #[error("model file is corrupt: {0}")]
    Corrupt(String),
    #[error("model format version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NGramError> = std::result::Result<T, E>;

/// Per-token natural-log probabilities of one document under one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub doc_id: String,
    pub model_id: String,
    pub logprobs: Vec<f64>,
}

impl TokenScores {
    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramModel {
    name: String,
    order: usize,
    alpha: f64,
    vocab: BTreeSet<char>,
    contexts: HashMap<Vec<u32>, ContextCounts>,
}

impl NGramModel {
    /// Counts every `order`-gram of every document in a single pass.
    pub fn train(docs: &[Document], order: usize, alpha: f64) -> Result<Self> {
        let seqs = docs.iter().map(tokenize).collect::<Result<Vec<_>, _>>()?;
        Self::train_sequences(&seqs, order, alpha)
    }

    pub fn train_sequences(seqs: &[TokenSeq], order: usize, alpha: f64) -> Result<Self> {
        if seqs.is_empty() {
            return Err(NGramError::NoDocuments);
        }
        let mut model = Self::empty(order, alpha)?;
        let width = order - 1;
        for seq in seqs {
            let mut window: Vec<u32> = vec![BOS; width];
            for &token in seq.tokens() {
                let sym = token as u32;
                model.vocab.insert(token);
                let entry = model.contexts.entry(window.clone()).or_default();
                entry.total += 1;
                *entry.next.entry(sym).or_insert(0) += 1;
                if width > 0 {
                    window.remove(0);
                    window.push(sym);
                }
            }
        }
        Ok(model)
    }

    /// A model with no counts; every prediction is uniform over its vocabulary
    /// plus UNK.
    pub fn empty(order: usize, alpha: f64) -> Result<Self> {
        if order == 0 {
            return Err(NGramError::BadOrder(order));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(NGramError::BadAlpha(alpha));
        }
        Ok(Self {
            name: format!("ngram-{order}"),
            order,
            alpha,
            vocab: BTreeSet::new(),
            contexts: HashMap::new(),
        })
    }

    pub fn with_vocab(mut self, vocab: impl IntoIterator<Item = char>) -> Self {
        self.vocab.extend(vocab);
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab(&self) -> &BTreeSet<char> {
        &self.vocab
    }

    /// |V ∪ {UNK}|.
    pub fn support_size(&self) -> usize {
        self.vocab.len() + 1
    }

    /// Raw count of `token` after `context` (the context must be `order − 1`
    /// symbols long; `None` entries stand for begin-of-sequence).
    pub fn count(&self, context: &[Option<char>], token: char) -> u64 {
        let key: Vec<u32> = context
            .iter()
            .map(|c| c.map_or(BOS, |c| c as u32))
            .collect();
        self.contexts
            .get(&key)
            .and_then(|c| c.next.get(&(token as u32)))
            .copied()
            .unwrap_or(0)
    }

    fn symbol(&self, token: char) -> u32 {
        if self.vocab.contains(&token) {
            token as u32
        } else {
            UNK
        }
    }

    fn probability(&self, context: &[u32], sym: u32) -> f64 {
        let denom_extra = self.alpha * self.support_size() as f64;
        let (count, total) = match self.contexts.get(context) {
            Some(c) => (c.next.get(&sym).copied().unwrap_or(0), c.total),
            None => (0, 0),
        };
        (count as f64 + self.alpha) / (total as f64 + denom_extra)
    }

    /// Predictive distribution after a context (for inspection and tests):
    /// one entry per vocabulary token, then UNK under `None`.
    pub fn distribution(&self, context: &[Option<char>]) -> Vec<(Option<char>, f64)> {
        let key: Vec<u32> = context
            .iter()
            .map(|c| c.map_or(BOS, |c| self.symbol(c)))
            .collect();
        self.vocab
            .iter()
            .map(|&t| (Some(t), self.probability(&key, t as u32)))
            .chain(std::iter::once((None, self.probability(&key, UNK))))
            .collect()
    }

    pub fn score(&self, seq: &TokenSeq, doc_id: &str) -> Result<TokenScores> {
        if seq.is_empty() {
            return Err(NGramError::EmptySequence(doc_id.to_string()));
        }
        let width = self.order - 1;
        let mut window: Vec<u32> = vec![BOS; width];
        let mut logprobs = Vec::with_capacity(seq.len());
        for &token in seq.tokens() {
            let sym = self.symbol(token);
            logprobs.push(self.probability(&window, sym).ln());
            if width > 0 {
                window.remove(0);
                window.push(sym);
            }
        }
        Ok(TokenScores {
            doc_id: doc_id.to_string(),
            model_id: self.name.clone(),
            logprobs,
        })
    }

    pub fn score_document(&self, doc: &Document) -> Result<TokenScores> {
        self.score(&tokenize(doc)?, &doc.id)
    }

    pub fn save(&self) -> Vec<u8> {
        let mut contexts: Vec<ContextEntry> = self
            .contexts
            .iter()
            .map(|(key, counts)| {
                let bos = key.iter().take_while(|&&s| s == BOS).count();
                let ctx: String = key[bos..].iter().map(|&s| sym_to_char(s)).collect();
                let next: BTreeMap<char, u64> = counts
                    .next
                    .iter()
                    .map(|(&s, &c)| (sym_to_char(s), c))
                    .collect();
                ContextEntry {
                    bos,
                    ctx,
                    total: counts.total,
                    next,
                }
            })
            .collect();
        contexts.sort_by(|a, b| (b.bos, &a.ctx).cmp(&(a.bos, &b.ctx)));
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            order: self.order,
            alpha: self.alpha,
            vocab: self.vocab.iter().collect(),
            contexts,
        };
        serde_json::to_vec(&file).expect("model serializes")
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let header: VersionProbe = serde_json::from_slice(bytes)
            .map_err(|e| NGramError::Corrupt(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(NGramError::Version {
                found: header.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let file: ModelFile =
            serde_json::from_slice(bytes).map_err(|e| NGramError::Corrupt(e.to_string()))?;
        let mut model = Self::empty(file.order, file.alpha)?.with_name(file.name);
        model.vocab = file.vocab.chars().collect();
        let width = file.order - 1;
        for entry in file.contexts {
            let ctx_len = entry.ctx.chars().count();
            if entry.bos + ctx_len != width {
                return Err(NGramError::Corrupt(format!(
                    "context {:?} with {} sentinels does not have length {width}",
                    entry.ctx, entry.bos
                )));
            }
            let mut key = vec![BOS; entry.bos];
            for c in entry.ctx.chars() {
                if !model.vocab.contains(&c) {
                    return Err(NGramError::Corrupt(format!(
                        "context character {c:?} is not in the vocabulary"
                    )));
                }
                key.push(c as u32);
            }
            let mut counts = ContextCounts::default();
            for (c, n) in entry.next {
                if !model.vocab.contains(&c) {
                    return Err(NGramError::Corrupt(format!(
                        "token {c:?} is not in the vocabulary"
                    )));
                }
                counts.next.insert(c as u32, n);
                counts.total += n;
            }
            if counts.total != entry.total {
                return Err(NGramError::Corrupt(format!(
                    "context {:?}: total {} does not match summed counts {}",
                    entry.ctx, entry.total, counts.total
                )));
            }
            if model.contexts.insert(key, counts).is_some() {
                return Err(NGramError::Corrupt(format!(
                    "context {:?} appears twice",
                    entry.ctx
                )));
            }
        }
        Ok(model)
    }

    pub fn save_to(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.save())?;
        Ok(())
    }

    pub fn load_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(&std::fs::read(path)?)
    }
}

fn sym_to_char(sym: u32) -> char {
    char::from_u32(sym).expect("stored symbols are characters")
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    name: String,
    order: usize,
    alpha: f64,
    vocab: String,
    contexts: Vec<ContextEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextEntry {
    bos: usize,
    ctx: String,
    total: u64,
    next: BTreeMap<char, u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, text)
    }

    fn seq(text: &str) -> TokenSeq {
        tokenize(&doc("s", text)).unwrap()
    }

    /// Independent add-α oracle: counts directly over the raw strings.
    fn brute_force_prob(train: &[&str], order: usize, alpha: f64, prefix: &str, token: char) -> f64 {
        let width = order - 1;
        let pad = |s: &str| -> Vec<Option<char>> {
            std::iter::repeat_n(None, width).chain(s.chars().map(Some)).collect()
        };
        let vocab: BTreeSet<char> = train.iter().flat_map(|s| s.chars()).collect();
        let map = |c: Option<char>| c.map(|c| if vocab.contains(&c) { c } else { '\u{FFFF}' });
        let p = pad(prefix);
        let ctx: Vec<Option<char>> = p[p.len() - width..].iter().map(|&c| map(c)).collect();
        let (mut hit, mut total) = (0u64, 0u64);
        for s in train {
            let padded = pad(s);
            for i in width..padded.len() {
                if padded[i - width..i] == ctx[..] {
                    total += 1;
                    if padded[i] == Some(token) {
                        hit += 1;
                    }
                }
            }
        }
        (hit as f64 + alpha) / (total as f64 + alpha * (vocab.len() + 1) as f64)
    }

    #[test]
    fn unigram_counts() {
        let model = NGramModel::train(&[doc("d", "aab")], 1, 1.0).unwrap();
        assert_eq!(model.count(&[], 'a'), 2);
        assert_eq!(model.count(&[], 'b'), 1);
        assert_eq!(model.contexts[&Vec::new()].total, 3);
        assert_eq!(model.support_size(), 3);
    }

    #[test]
    fn unigram_scores_match_add_alpha() {
        let model = NGramModel::train(&[doc("d", "aab")], 1, 1.0).unwrap();
        // P(a) = 3/6, P(b) = 2/6, P(UNK) = 1/6.
        let scores = model.score(&seq("abz"), "x").unwrap();
        assert_eq!(scores.logprobs, vec![0.5f64.ln(), (2.0f64 / 6.0).ln(), (1.0f64 / 6.0).ln()]);
        for (t, expected) in [('a', 0.5), ('b', 1.0 / 3.0), ('z', 1.0 / 6.0)] {
            let oracle = brute_force_prob(&["aab"], 1, 1.0, "", t);
            assert!((oracle - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_model_scores_ln_one_third() {
        let model = NGramModel::empty(3, 0.5).unwrap().with_vocab(['x', 'y']);
        let scores = model.score(&seq("xyqx"), "d").unwrap();
        for lp in scores.logprobs {
            assert_eq!(lp, (1.0f64 / 3.0).ln());
        }
    }

    #[test]
    fn score_length_matches_tokens() {
        let model = NGramModel::train(&[doc("d", "aab")], 2, 0.1).unwrap();
        assert_eq!(model.score(&seq("ab"), "d").unwrap().len(), 2);
    }

    #[test]
    fn higher_order_matches_brute_force() {
        let train = ["abracadabra", "cadabra", "barbara"];
        let docs: Vec<Document> = train.iter().enumerate().map(|(i, t)| doc(&i.to_string(), t)).collect();
        for order in 1..=4 {
            let model = NGramModel::train(&docs, order, 0.3).unwrap();
            let probe = "abrxcab";
            let scores = model.score(&seq(probe), "p").unwrap();
            let chars: Vec<char> = probe.chars().collect();
            for (i, lp) in scores.logprobs.iter().enumerate() {
                let prefix: String = chars[..i].iter().collect();
                let oracle = brute_force_prob(&train, order, 0.3, &prefix, chars[i]).ln();
                assert!((lp - oracle).abs() < 1e-12, "order {order} pos {i}: {lp} vs {oracle}");
            }
        }
    }

    #[test]
    fn training_errors() {
        assert!(matches!(NGramModel::train(&[], 3, 0.1), Err(NGramError::NoDocuments)));
        assert!(matches!(NGramModel::train(&[doc("d", "a")], 0, 0.1), Err(NGramError::BadOrder(0))));
        assert!(matches!(NGramModel::train(&[doc("d", "a")], 2, 0.0), Err(NGramError::BadAlpha(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let docs = vec![doc("a", "hello world"), doc("b", "held worlds")];
        let a = NGramModel::train(&docs, 3, 0.1).unwrap().save();
        let b = NGramModel::train(&docs, 3, 0.1).unwrap().save();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_round_trip() {
        let model = NGramModel::train(&[doc("d", "aab")], 1, 1.0).unwrap();
        let loaded = NGramModel::load(&model.save()).unwrap();
        assert_eq!(loaded, model);
        let s = seq("ab");
        assert_eq!(loaded.score(&s, "x").unwrap(), model.score(&s, "x").unwrap());

        let model = NGramModel::train(&[doc("d", "héllo wörld"), doc("e", "hallo")], 4, 0.1)
            .unwrap()
            .with_name("target");
        assert_eq!(NGramModel::load(&model.save()).unwrap(), model);
    }

    #[test]
    fn documented_layout() {
        let model = NGramModel::train(&[doc("d", "ab")], 2, 0.1).unwrap().with_name("target");
        let text = String::from_utf8(model.save()).unwrap();
        assert_eq!(
            text,
            r#"{"format_version":1,"name":"target","order":2,"alpha":0.1,"vocab":"ab","contexts":[{"bos":1,"ctx":"","total":1,"next":{"a":1}},{"bos":0,"ctx":"a","total":1,"next":{"b":1}}]}"#
        );
    }

    #[test]
    fn truncated_bytes_rejected() {
        let bytes = NGramModel::train(&[doc("d", "aab")], 2, 1.0).unwrap().save();
        let err = NGramModel::load(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, NGramError::Corrupt(_)), "{err}");
    }

    #[test]
    fn newer_version_rejected_with_both_versions() {
        let bytes = NGramModel::train(&[doc("d", "aab")], 2, 1.0).unwrap().save();
        let text = String::from_utf8(bytes).unwrap().replace("\"format_version\":1", "\"format_version\":2");
        let err = NGramModel::load(text.as_bytes()).unwrap_err();
        assert!(matches!(err, NGramError::Version { found: 2, supported: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('1'));
    }

    #[test]
    fn inconsistent_totals_rejected() {
        let text = r#"{"format_version":1,"name":"m","order":1,"alpha":1.0,"vocab":"ab","contexts":[{"bos":0,"ctx":"","total":5,"next":{"a":2,"b":1}}]}"#;
        assert!(matches!(NGramModel::load(text.as_bytes()), Err(NGramError::Corrupt(_))));
    }

    fn random_text(rng: &mut SplitMix64, alphabet: &[char], len: usize) -> String {
        (0..len).map(|_| alphabet[rng.below(alphabet.len() as u64) as usize]).collect()
    }

    proptest! {
        #[test]
        fn distributions_normalize(seed in any::<u64>(), order in 1usize..5, alpha in 0.01f64..2.0) {
            let mut rng = SplitMix64::new(seed);
            let alphabet: Vec<char> = "abcde".chars().collect();
            let docs: Vec<Document> = (0..4)
                .map(|i| doc(&i.to_string(), &random_text(&mut rng, &alphabet, 30)))
                .collect();
            let model = NGramModel::train(&docs, order, alpha).unwrap();
            for key in model.contexts.keys() {
                let ctx: Vec<Option<char>> = key.iter().map(|&s| if s == BOS { None } else { char::from_u32(s) }).collect();
                let total: f64 = model.distribution(&ctx).iter().map(|(_, p)| p).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
            let unseen: Vec<Option<char>> = vec![Some('z'); order - 1];
            let total: f64 = model.distribution(&unseen).iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn logprobs_are_finite_and_nonpositive(seed in any::<u64>(), order in 1usize..6) {
            let mut rng = SplitMix64::new(seed);
            let alphabet: Vec<char> = "abc d".chars().collect();
            let docs = vec![doc("t", &random_text(&mut rng, &alphabet, 50))];
            let model = NGramModel::train(&docs, order, 0.1).unwrap();
            let probe = random_text(&mut rng, &"abcdxyz".chars().collect::<Vec<_>>(), 40);
            let scores = model.score(&seq(&probe), "p").unwrap();
            prop_assert!(scores.logprobs.iter().all(|lp| lp.is_finite() && *lp <= 0.0));
        }
    }

    /// Members (training documents) should score at least as well as a
    /// token-permuted control of the same length and alphabet, across many
    /// random corpora. One-sided sign test at 0.01.
    #[test]
    fn training_documents_beat_permuted_controls() {
        let alphabet: Vec<char> = "abcdefgh ".chars().collect();
        let trials = 100;
        let mut wins = 0;
        for trial in 0..trials {
            let mut rng = SplitMix64::new(1000 + trial);
            let docs: Vec<Document> = (0..20)
                .map(|i| doc(&i.to_string(), &random_text(&mut rng, &alphabet, 120)))
                .collect();
            let model = NGramModel::train(&docs, DEFAULT_ORDER, DEFAULT_ALPHA).unwrap();
            let target = &docs[rng.below(docs.len() as u64) as usize];
            let mut control: Vec<char> = target.text.chars().collect();
            rng.shuffle(&mut control);
            let control: String = control.into_iter().collect();
            let mean = |text: &str| {
                let s = model.score(&seq(text), "x").unwrap();
                s.logprobs.iter().sum::<f64>() / s.len() as f64
            };
            if mean(&target.text) >= mean(&control) {
                wins += 1;
            }
        }
        // P(Binomial(100, 0.5) >= 63) < 0.01.
        let tail: f64 = (wins..=trials)
            .map(|k| binomial(trials, k) * 0.5f64.powi(trials as i32))
            .sum();
        assert!(tail < 0.01, "{wins}/{trials} wins, p = {tail}");
    }

    fn binomial(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }
}
