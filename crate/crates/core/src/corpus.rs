//! JSONL document corpora.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelId, Taxonomy};

/// One corpus record: `{"text": "...", "labels": ["name", ...]}`. Labels may
/// be absent for unlabeled prediction input.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    #[serde(default)]
    pub labels: Vec<String>,
}

impl Document {
    /// Resolves label names to ids. Duplicates collapse.
    pub fn label_ids(&self, t: &Taxonomy) -> Result<BTreeSet<LabelId>> {
        self.labels.iter().map(|n| t.id(n)).collect()
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Document>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            docs.push(serde_json::from_str(&line)?);
        }
    }
    Ok(docs)
}

pub fn to_jsonl(docs: &[Document]) -> Result<String> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(to_jsonl(docs)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Gold label ids of every document, failing on the first unlabeled one.
pub fn gold_sets(docs: &[Document], t: &Taxonomy) -> Result<Vec<BTreeSet<LabelId>>> {
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let set = d.label_ids(t)?;
            if set.is_empty() {
                return Err(Error::MissingLabels(i));
            }
            Ok(set)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let docs = vec![
            Document { text: "a b".into(), labels: vec!["A".into()] },
            Document { text: "quote \" and\nnewline".into(), labels: vec![] },
        ];
        let text = to_jsonl(&docs).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_jsonl(&text).unwrap(), docs);
    }

    #[test]
    fn missing_labels_field_defaults_to_empty() {
        let docs = parse_jsonl("{\"text\": \"x\"}\n\n").unwrap();
        assert!(docs[0].labels.is_empty());
    }

    #[test]
    fn unlabeled_document_is_reported_by_index() {
        let t = Taxonomy::parse("R\tA\n").unwrap();
        let docs = parse_jsonl("{\"text\":\"x\",\"labels\":[\"A\"]}\n{\"text\":\"y\"}\n").unwrap();
        assert!(matches!(gold_sets(&docs, &t), Err(Error::MissingLabels(1))));
    }
}
