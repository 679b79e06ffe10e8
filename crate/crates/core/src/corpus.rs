//! Corpus loading, character tokenization and disjoint experiment splits.
//!
//! A corpus is UTF-8 JSONL with one `{"id": .., "text": ..}` object per line.
//! An optional `"label"` (0 or 1) marks known membership, which is only used
//! when the audited model is external and its training set is known upfront.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON on line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: document id is empty")]
    EmptyId { line: usize },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("line {line}: document {id:?} has empty text")]
    EmptyText { line: usize, id: String },
    #[error("document {id:?}: label must be 0 or 1, got {value}")]
    BadLabel { id: String, value: u8 },
    #[error("document {0:?} has empty text and cannot be tokenized")]
    EmptyTokenSeq(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("split leaves partition {0} empty")]
    EmptyPartition(Partition),
    #[error("split of {0} leaves no members or no non-members in an attack partition")]
    Unbalanced(&'static str),
    #[error("document {0:?} carries no membership label")]
    MissingLabel(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// One text record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Membership ground truth: 1 = member, 0 = non-member.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }
}

pub fn load_corpus(path: impl AsRef<Path>, allow_empty: bool) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_corpus(BufReader::new(file), allow_empty).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Parses JSONL from any reader. Blank lines are skipped.
pub fn read_corpus<R: BufRead>(reader: R, allow_empty: bool) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|source| CorpusError::Json {
            line: line_no,
            source,
        })?;
        if doc.id.is_empty() {
            return Err(CorpusError::EmptyId { line: line_no });
        }
        if doc.text.is_empty() && !allow_empty {
            return Err(CorpusError::EmptyText {
                line: line_no,
                id: doc.id,
            });
        }
        if let Some(value) = doc.label {
            if value > 1 {
                return Err(CorpusError::BadLabel { id: doc.id, value });
            }
        }
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Writes documents as JSONL, one object per line.
pub fn write_corpus<W: std::io::Write>(mut out: W, docs: &[Document]) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// A document's tokens. The default tokenizer yields one token per Unicode
/// scalar value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    tokens: Vec<char>,
}

impl TokenSeq {
    pub fn tokens(&self) -> &[char] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false for sequences produced by [`tokenize`].
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn detokenize(&self) -> String {
        self.tokens.iter().collect()
    }
}

pub fn tokenize(doc: &Document) -> Result<TokenSeq> {
    tokenize_text(&doc.id, &doc.text)
}

pub(crate) fn tokenize_text(id: &str, text: &str) -> Result<TokenSeq> {
    if text.is_empty() {
        return Err(CorpusError::EmptyTokenSeq(id.to_string()));
    }
    Ok(TokenSeq {
        tokens: text.chars().collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Training data of the target model; the source of members.
    MemberTrain,
    /// Training data of the reference model.
    ReferenceTrain,
    /// Non-members used to fit attacks.
    AttackTrain,
    /// Non-members held out for evaluation.
    AttackTest,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::MemberTrain,
        Partition::ReferenceTrain,
        Partition::AttackTrain,
        Partition::AttackTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Partition::MemberTrain => "member_train",
            Partition::ReferenceTrain => "reference_train",
            Partition::AttackTrain => "attack_train",
            Partition::AttackTest => "attack_test",
        }
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledId {
    pub id: String,
    pub label: u8,
}

/// Assignment of every document to one partition, plus the labeled attack
/// example lists derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    /// (member_train, reference_train, attack_train, attack_test).
    pub fractions: [f64; 4],
    pub assignment: BTreeMap<String, Partition>,
    pub attack_train: Vec<LabeledId>,
    pub attack_test: Vec<LabeledId>,
}

impl SplitPlan {
    /// Ids in `partition`, sorted.
    pub fn ids_in(&self, partition: Partition) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, p)| **p == partition)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn partition_size(&self, partition: Partition) -> usize {
        self.assignment.values().filter(|p| **p == partition).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split plan serializes")
    }
}

fn validate_fractions(fractions: &[f64; 4]) -> Result<()> {
    for (f, p) in fractions.iter().zip(Partition::ALL) {
        if !(f.is_finite() && *f > 0.0 && *f < 1.0) {
            return Err(CorpusError::Fractions(format!(
                "{p} fraction {f} is outside (0, 1)"
            )));
        }
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Fractions(format!("fractions sum to {sum}, not 1")));
    }
    Ok(())
}

fn sorted_unique_ids(corpus: &[Document]) -> Result<Vec<String>> {
    let mut ids: Vec<String> = corpus.iter().map(|d| d.id.clone()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(CorpusError::DuplicateId(w[0].clone()));
    }
    Ok(ids)
}

/// Shuffles the corpus with a seeded Fisher-Yates pass and slices it into the
/// four partitions by `fractions`.
///
/// Members for the attack sets come from `member_train` (first half of its
/// shuffled order to attack_train, second half to attack_test); non-members are
/// the documents of the attack partitions themselves. Each side is truncated
/// to equal member and non-member counts.
pub fn make_splits(corpus: &[Document], seed: u64, fractions: [f64; 4]) -> Result<SplitPlan> {
    validate_fractions(&fractions)?;
    let mut ids = sorted_unique_ids(corpus)?;
    SplitMix64::for_stream(seed, "split").shuffle(&mut ids);

    let n = ids.len();
    let mut bounds = [0usize; 5];
    let mut cumulative = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        cumulative += f;
        bounds[i + 1] = if i == 3 {
            n
        } else {
            ((n as f64) * cumulative).round() as usize
        };
    }

    let mut assignment = BTreeMap::new();
    let mut slices: Vec<&[String]> = Vec::with_capacity(4);
    for (i, partition) in Partition::ALL.into_iter().enumerate() {
        let slice = &ids[bounds[i]..bounds[i + 1]];
        if slice.is_empty() {
            return Err(CorpusError::EmptyPartition(partition));
        }
        for id in slice {
            assignment.insert(id.clone(), partition);
        }
        slices.push(slice);
    }

    let members = slices[0];
    let half = members.len().div_ceil(2);
    let attack_train = balanced_side(&members[..half], slices[2], "attack_train")?;
    let attack_test = balanced_side(&members[half..], slices[3], "attack_test")?;

    Ok(SplitPlan {
        seed,
        fractions,
        assignment,
        attack_train,
        attack_test,
    })
}

fn balanced_side(
    members: &[String],
    non_members: &[String],
    side: &'static str,
) -> Result<Vec<LabeledId>> {
    let k = members.len().min(non_members.len());
    if k == 0 {
        return Err(CorpusError::Unbalanced(side));
    }
    let mut out: Vec<LabeledId> = members[..k]
        .iter()
        .map(|id| LabeledId {
            id: id.clone(),
            label: 1,
        })
        .chain(non_members[..k].iter().map(|id| LabeledId {
            id: id.clone(),
            label: 0,
        }))
        .collect();
    out.sort();
    Ok(out)
}

/// Splits a pre-labeled corpus (external target model) into attack_train and
/// attack_test, stratified by label and balanced per side.
///
/// The member_train / reference_train partitions are unused in this mode and
/// the plan records fractions `[0, 0, 0.5, 0.5]`.
pub fn make_labeled_splits(corpus: &[Document], seed: u64) -> Result<SplitPlan> {
    sorted_unique_ids(corpus)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut sorted: Vec<&Document> = corpus.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for doc in sorted {
        match doc.label {
            Some(1) => pos.push(doc.id.clone()),
            Some(0) => neg.push(doc.id.clone()),
            Some(value) => {
                return Err(CorpusError::BadLabel {
                    id: doc.id.clone(),
                    value,
                })
            }
            None => return Err(CorpusError::MissingLabel(doc.id.clone())),
        }
    }
    let mut rng = SplitMix64::for_stream(seed, "labeled-split");
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let (pos_train, pos_test) = pos.split_at(pos.len().div_ceil(2));
    let (neg_train, neg_test) = neg.split_at(neg.len().div_ceil(2));
    let attack_train = balanced_side(pos_train, neg_train, "attack_train")?;
    let attack_test = balanced_side(pos_test, neg_test, "attack_test")?;

    let mut assignment = BTreeMap::new();
    for e in &attack_train {
        assignment.insert(e.id.clone(), Partition::AttackTrain);
    }
    for e in &attack_test {
        assignment.insert(e.id.clone(), Partition::AttackTest);
    }
    Ok(SplitPlan {
        seed,
        fractions: [0.0, 0.0, 0.5, 0.5],
        assignment,
        attack_train,
        attack_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| Document::new(format!("doc-{i:04}"), format!("text {i}")))
            .collect()
    }

    #[test]
    fn reads_documents_in_file_order() {
        let input = "{\"id\":\"a\",\"text\":\"hello\"}\n{\"id\":\"b\",\"text\":\"hi\",\"extra\":3}\n";
        let docs = read_corpus(input.as_bytes(), false).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0], Document::new("a", "hello"));
        assert_eq!(docs[1], Document::new("b", "hi"));
    }

    #[test]
    fn duplicate_id_is_named() {
        let input = "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"y\"}\n{\"id\":\"a\",\"text\":\"z\"}\n";
        let err = read_corpus(input.as_bytes(), false).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(ref id) if id == "a"));
        assert!(err.to_string().contains("\"a\""));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(read_corpus("".as_bytes(), false).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let input = "{\"id\":\"a\",\"text\":\"x\"}\n{not json}\n";
        match read_corpus(input.as_bytes(), false).unwrap_err() {
            CorpusError::Json { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_text_needs_opt_in() {
        let input = "{\"id\":\"a\",\"text\":\"\"}\n";
        assert!(matches!(
            read_corpus(input.as_bytes(), false),
            Err(CorpusError::EmptyText { line: 1, .. })
        ));
        assert_eq!(read_corpus(input.as_bytes(), true).unwrap().len(), 1);
    }

    #[test]
    fn labels_are_validated() {
        let ok = "{\"id\":\"a\",\"text\":\"x\",\"label\":1}\n";
        assert_eq!(read_corpus(ok.as_bytes(), false).unwrap()[0].label, Some(1));
        let bad = "{\"id\":\"a\",\"text\":\"x\",\"label\":2}\n";
        assert!(matches!(
            read_corpus(bad.as_bytes(), false),
            Err(CorpusError::BadLabel { value: 2, .. })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_corpus("/definitely/not/here.jsonl", false).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.jsonl"));
    }

    #[test]
    fn tokenizer_emits_scalar_values() {
        let seq = tokenize(&Document::new("x", "ab")).unwrap();
        assert_eq!(seq.tokens(), &['a', 'b']);
        let seq = tokenize(&Document::new("x", "héé")).unwrap();
        assert_eq!(seq.tokens(), &['h', 'é', 'é']);
        assert_eq!(seq.len(), 3);
        assert!(matches!(
            tokenize(&Document::new("x", "")),
            Err(CorpusError::EmptyTokenSeq(_))
        ));
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let plan = make_splits(&corpus(100), 7, [0.4, 0.2, 0.2, 0.2]).unwrap();
        let sizes: Vec<usize> = Partition::ALL
            .iter()
            .map(|p| plan.partition_size(*p))
            .collect();
        assert_eq!(sizes, vec![40, 20, 20, 20]);
        // 20 members + 20 non-members on each attack side.
        assert_eq!(plan.attack_train.len(), 40);
        assert_eq!(plan.attack_test.len(), 40);
    }

    #[test]
    fn split_is_deterministic() {
        let docs = corpus(100);
        let a = make_splits(&docs, 7, [0.4, 0.2, 0.2, 0.2]).unwrap();
        let b = make_splits(&docs, 7, [0.4, 0.2, 0.2, 0.2]).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = make_splits(&docs, 8, [0.4, 0.2, 0.2, 0.2]).unwrap();
        assert_ne!(a.assignment, c.assignment);
    }

    #[test]
    fn split_independent_of_input_order() {
        let docs = corpus(60);
        let mut reversed = docs.clone();
        reversed.reverse();
        let a = make_splits(&docs, 1, [0.4, 0.2, 0.2, 0.2]).unwrap();
        let b = make_splits(&reversed, 1, [0.4, 0.2, 0.2, 0.2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_corpus_leaves_partition_empty() {
        let err = make_splits(&corpus(3), 7, [0.4, 0.2, 0.2, 0.2]).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyPartition(_)));
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(matches!(
            make_splits(&corpus(100), 7, [0.4, 0.2, 0.2, 0.3]),
            Err(CorpusError::Fractions(_))
        ));
        assert!(matches!(
            make_splits(&corpus(100), 7, [1.0, 0.0, 0.0, 0.0]),
            Err(CorpusError::Fractions(_))
        ));
    }

    #[test]
    fn split_plan_json_shape() {
        let plan = make_splits(&corpus(20), 3, [0.4, 0.2, 0.2, 0.2]).unwrap();
        let value: serde_json::Value = serde_json::from_str(&plan.to_json()).unwrap();
        assert_eq!(value["seed"], 3);
        assert_eq!(value["fractions"].as_array().unwrap().len(), 4);
        let name = value["assignment"]["doc-0000"].as_str().unwrap();
        assert!(Partition::ALL.iter().any(|p| p.name() == name));
        let back: SplitPlan = serde_json::from_str(&plan.to_json()).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn labeled_split_balances_and_stratifies() {
        let docs: Vec<Document> = (0..30)
            .map(|i| Document::new(format!("d{i:02}"), "t").with_label(u8::from(i % 3 == 0)))
            .collect();
        let plan = make_labeled_splits(&docs, 5).unwrap();
        for side in [&plan.attack_train, &plan.attack_test] {
            let pos = side.iter().filter(|e| e.label == 1).count();
            assert_eq!(pos * 2, side.len());
        }
        let unlabeled = vec![Document::new("a", "t")];
        assert!(matches!(
            make_labeled_splits(&unlabeled, 5),
            Err(CorpusError::MissingLabel(_))
        ));
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_cover(n in 20usize..300, seed in any::<u64>()) {
            let docs = corpus(n);
            let plan = make_splits(&docs, seed, [0.4, 0.2, 0.2, 0.2]).unwrap();
            prop_assert_eq!(plan.assignment.len(), n);
            for doc in &docs {
                prop_assert!(plan.assignment.contains_key(&doc.id));
            }
            for side in [&plan.attack_train, &plan.attack_test] {
                let pos = side.iter().filter(|e| e.label == 1).count();
                let neg = side.len() - pos;
                prop_assert!(pos > 0 && neg > 0);
                prop_assert!(pos.abs_diff(neg) <= 1);
                for e in side.iter() {
                    let expected = if e.label == 1 { Partition::MemberTrain } else { Partition::AttackTrain };
                    let actual = plan.assignment[&e.id];
                    if e.label == 1 {
                        prop_assert_eq!(actual, expected);
                    } else {
                        prop_assert!(actual == Partition::AttackTrain || actual == Partition::AttackTest);
                    }
                }
            }
            let train: HashSet<_> = plan.attack_train.iter().map(|e| &e.id).collect();
            prop_assert!(plan.attack_test.iter().all(|e| !train.contains(&e.id)));
        }

        #[test]
        fn tokenizer_round_trips(text in "\\PC{1,64}") {
            let seq = tokenize(&Document::new("x", text.clone())).unwrap();
            prop_assert_eq!(seq.detokenize(), text.clone());
            prop_assert_eq!(seq.len(), text.chars().count());
        }
    }
}
