//! Externally computed per-token log-probabilities.
//!
//! Score files are UTF-8 JSONL. The first line is a header
//! `{"model_id": "...", "units": "nats"}`; each following line is
//! `{"doc_id": "...", "logprobs": [..]}` with natural-log probabilities.
//! Token counts are trusted as given; text is never re-tokenized.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ngram::TokenScores;

pub const UNITS: &str = "nats";

#[derive(Debug, thiserror::Error)]
pub enum ScoresError {
    #[error("cannot read score file {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("score file has no header line")]
    MissingHeader,
    #[error("malformed JSON on line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("score file units are {0:?}; only natural-log \"nats\" are accepted")]
    Units(String),
    #[error("document {doc_id:?}: logprob[{index}] = {value} is positive (probability > 1)")]
    Positive {
        doc_id: String,
        index: usize,
        value: f64,
    },
    #[error("document {doc_id:?}: logprob[{index}] is not finite")]
    NonFinite { doc_id: String, index: usize },
    #[error("document {0:?} has no logprobs")]
    Empty(String),
    #[error("document {0:?} appears more than once in the score file")]
    Duplicate(String),
    #[error("document {doc_id:?} is missing from score file for model {model_id:?}")]
    Missing { doc_id: String, model_id: String },
}

pub type Result<T, E = ScoresError> = std::result::Result<T, E>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_id: String,
    units: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    doc_id: String,
    logprobs: Vec<f64>,
}

/// Validated scores for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreFile {
    model_id: String,
    records: Vec<TokenScores>,
    index: HashMap<String, usize>,
}

impl ScoreFile {
    pub fn new(model_id: impl Into<String>, records: Vec<TokenScores>) -> Result<Self> {
        let model_id = model_id.into();
        let mut index = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            validate_logprobs(&rec.doc_id, &rec.logprobs)?;
            if index.insert(rec.doc_id.clone(), i).is_some() {
                return Err(ScoresError::Duplicate(rec.doc_id.clone()));
            }
        }
        Ok(Self {
            model_id,
            records,
            index,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn records(&self) -> &[TokenScores] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Join point: looks up a document, failing with its id when absent.
    pub fn get(&self, doc_id: &str) -> Result<&TokenScores> {
        self.index
            .get(doc_id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| ScoresError::Missing {
                doc_id: doc_id.to_string(),
                model_id: self.model_id.clone(),
            })
    }

    pub fn write<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_scores(out, &self.model_id, &self.records)
    }
}

fn validate_logprobs(doc_id: &str, logprobs: &[f64]) -> Result<()> {
    if logprobs.is_empty() {
        return Err(ScoresError::Empty(doc_id.to_string()));
    }
    for (index, &value) in logprobs.iter().enumerate() {
        if !value.is_finite() {
            return Err(ScoresError::NonFinite {
                doc_id: doc_id.to_string(),
                index,
            });
        }
        if value > 0.0 {
            return Err(ScoresError::Positive {
                doc_id: doc_id.to_string(),
                index,
                value,
            });
        }
    }
    Ok(())
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreFile> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| ScoresError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_scores(BufReader::new(file)).map_err(|e| match e {
        ScoresError::Io { source, .. } => ScoresError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_scores<R: BufRead>(reader: R) -> Result<ScoreFile> {
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| ScoresError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let json_err = |source| ScoresError::Json {
            line: line_no,
            source,
        };
        if header.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(json_err)?;
            if h.units != UNITS {
                return Err(ScoresError::Units(h.units));
            }
            header = Some(h);
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(json_err)?;
        records.push(TokenScores {
            doc_id: rec.doc_id,
            model_id: String::new(),
            logprobs: rec.logprobs,
        });
    }
    let header = header.ok_or(ScoresError::MissingHeader)?;
    for rec in &mut records {
        rec.model_id.clone_from(&header.model_id);
    }
    ScoreFile::new(header.model_id, records)
}

/// Writes a score file. Floats are written in shortest round-trip form, so a
/// reload reproduces every logprob bit for bit.
pub fn write_scores<'a, W, I>(mut out: W, model_id: &str, records: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a TokenScores>,
{
    serde_json::to_writer(
        &mut out,
        &Header {
            model_id: model_id.to_string(),
            units: UNITS.to_string(),
        },
    )?;
    out.write_all(b"\n")?;
    for rec in records {
        serde_json::to_writer(
            &mut out,
            &Record {
                doc_id: rec.doc_id.clone(),
                logprobs: rec.logprobs.clone(),
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "{\"model_id\":\"m\",\"units\":\"nats\"}\n";

    fn parse(body: &str) -> Result<ScoreFile> {
        read_scores(format!("{HEADER}{body}").as_bytes())
    }

    #[test]
    fn reads_one_record() {
        let file = parse("{\"doc_id\":\"a\",\"logprobs\":[-1.0,-2.0]}\n").unwrap();
        assert_eq!(file.model_id(), "m");
        let rec = file.get("a").unwrap();
        assert_eq!(rec.logprobs, vec![-1.0, -2.0]);
        assert_eq!(rec.model_id, "m");
    }

    #[test]
    fn positive_logprob_rejected_with_location() {
        let err = parse("{\"doc_id\":\"a\",\"logprobs\":[-1.0,0.5]}\n").unwrap_err();
        match err {
            ScoresError::Positive { doc_id, index, .. } => {
                assert_eq!(doc_id, "a");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_logprob_accepted() {
        let file = parse("{\"doc_id\":\"a\",\"logprobs\":[0.0]}\n").unwrap();
        assert_eq!(file.get("a").unwrap().logprobs, vec![0.0]);
    }

    #[test]
    fn out_of_range_numbers_rejected() {
        assert!(parse("{\"doc_id\":\"a\",\"logprobs\":[-1e999]}\n").is_err());
        assert!(parse("{\"doc_id\":\"a\",\"logprobs\":[NaN]}\n").is_err());
    }

    #[test]
    fn duplicate_and_missing_docs() {
        let err = parse("{\"doc_id\":\"a\",\"logprobs\":[-1]}\n{\"doc_id\":\"a\",\"logprobs\":[-1]}\n").unwrap_err();
        assert!(matches!(err, ScoresError::Duplicate(ref id) if id == "a"));
        let file = parse("{\"doc_id\":\"a\",\"logprobs\":[-1]}\n").unwrap();
        let err = file.get("b").unwrap_err();
        assert!(err.to_string().contains("\"b\""));
    }

    #[test]
    fn units_must_be_nats() {
        let err = read_scores("{\"model_id\":\"m\",\"units\":\"bits\"}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, ScoresError::Units(ref u) if u == "bits"));
        assert!(matches!(read_scores("".as_bytes()), Err(ScoresError::MissingHeader)));
        assert!(read_scores("{\"model_id\":\"m\"}\n".as_bytes()).is_err());
    }

    #[test]
    fn empty_logprobs_rejected() {
        assert!(matches!(
            parse("{\"doc_id\":\"a\",\"logprobs\":[]}\n"),
            Err(ScoresError::Empty(_))
        ));
    }

    proptest! {
        #[test]
        fn write_then_read_is_bit_exact(values in prop::collection::vec(-1e6f64..=0.0, 1..50)) {
            let rec = TokenScores { doc_id: "d".into(), model_id: "m".into(), logprobs: values };
            let mut buf = Vec::new();
            write_scores(&mut buf, "m", [&rec]).unwrap();
            let back = read_scores(buf.as_slice()).unwrap();
            let got = &back.get("d").unwrap().logprobs;
            prop_assert_eq!(got.len(), rec.logprobs.len());
            for (a, b) in got.iter().zip(&rec.logprobs) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
