//! Corpus records, newline-delimited JSON persistence, and vocabularies.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bio;
use crate::config::ProfileField;
use crate::encoder::ProfileSet;
use crate::error::{Error, Result};

/// One annotated utterance. The wire format is a single JSON object per
/// line with fields `tokens`, `intent`, `tags`, `up`, `ca`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub tokens: Vec<String>,
    pub intent: String,
    pub tags: Vec<String>,
    #[serde(flatten)]
    pub profile: ProfileSet,
}

impl CorpusRecord {
    /// Check internal consistency and the profile against the manifest.
    pub fn validate(&self, manifest: &[ProfileField]) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::invalid("record has no tokens"));
        }
        if self.tags.len() != self.tokens.len() {
            return Err(Error::invalid(format!(
                "{} tags for {} tokens",
                self.tags.len(),
                self.tokens.len()
            )));
        }
        if self.intent.is_empty() {
            return Err(Error::invalid("record has an empty intent"));
        }
        bio::bio_decode_spans(&self.tags)?;
        self.profile.validate(manifest)
    }
}

/// Read a corpus file, validating every record against the manifest.
/// Errors carry the 1-based line number.
pub fn load_corpus(path: &Path, manifest: &[ProfileField]) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(|e| {
        Error::invalid(format!("cannot open corpus {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            line: line_no,
            msg: e.to_string(),
        })?;
        record.validate(manifest).map_err(|e| Error::Corpus {
            line: line_no,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write records as newline-delimited JSON.
pub fn save_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Token vocabulary with reserved padding and unknown entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

impl TokenVocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TokenVocab { tokens, index }
    }

    /// Rebuild the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Frozen intent and slot label sets with the derived BIO tagset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub intents: Vec<String>,
    pub slot_types: Vec<String>,
    pub tagset: Vec<String>,
}

impl LabelVocabulary {
    fn from_sets(intents: BTreeSet<String>, slot_types: BTreeSet<String>) -> Self {
        let intents: Vec<String> = intents.into_iter().collect();
        let slot_types: Vec<String> = slot_types.into_iter().collect();
        let mut tagset = vec!["O".to_string()];
        for ty in &slot_types {
            tagset.push(format!("B-{ty}"));
            tagset.push(format!("I-{ty}"));
        }
        LabelVocabulary { intents, slot_types, tagset }
    }

    pub fn n_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn n_slot_types(&self) -> usize {
        self.slot_types.len()
    }

    pub fn n_tags(&self) -> usize {
        self.tagset.len()
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.intents.iter().position(|i| i == intent)
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tagset.iter().position(|t| t == tag)
    }

    pub fn tag_str(&self, id: usize) -> &str {
        &self.tagset[id]
    }

    /// Tag ids for a full sequence; `None` if any tag is outside the
    /// frozen tagset.
    pub fn tag_ids(&self, tags: &[String]) -> Option<Vec<usize>> {
        tags.iter().map(|t| self.tag_id(t)).collect()
    }
}

/// Build both vocabularies from the training split. Tokens are sorted
/// lexicographically behind the reserved `<pad>` and `<unk>` entries so
/// ids are stable across runs.
pub fn build_vocab(records: &[CorpusRecord]) -> Result<(TokenVocab, LabelVocabulary)> {
    if records.is_empty() {
        return Err(Error::invalid("cannot build vocabularies from an empty corpus"));
    }
    let mut tokens: BTreeSet<String> = BTreeSet::new();
    let mut intents: BTreeSet<String> = BTreeSet::new();
    let mut slot_types: BTreeSet<String> = BTreeSet::new();
    for record in records {
        tokens.extend(record.tokens.iter().cloned());
        intents.insert(record.intent.clone());
        for span in bio::bio_decode_spans(&record.tags)? {
            slot_types.insert(span.label);
        }
    }
    let mut all = vec!["<pad>".to_string(), "<unk>".to_string()];
    all.extend(tokens);
    Ok((TokenVocab::from_tokens(all), LabelVocabulary::from_sets(intents, slot_types)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn manifest() -> Vec<ProfileField> {
        use crate::config::ProfileKind;
        vec![
            ProfileField {
                kind: ProfileKind::Up,
                name: "pref".into(),
                dim: 2,
                distribution: true,
            },
            ProfileField {
                kind: ProfileKind::Ca,
                name: "place".into(),
                dim: 3,
                distribution: false,
            },
        ]
    }

    fn record(tokens: &[&str], intent: &str, tags: &[&str]) -> CorpusRecord {
        CorpusRecord {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            intent: intent.to_string(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            profile: ProfileSet {
                up: vec![vec![0.8, 0.2]],
                ca: vec![vec![0.0, 1.0, 0.5]],
            },
        }
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let records = vec![
            record(&["play", "jazz"], "play.music", &["O", "B-title"]),
            record(&["go", "to", "oslo"], "travel.flight", &["O", "O", "B-city"]),
        ];
        save_corpus(&path, &records).unwrap();
        let loaded = load_corpus(&path, &manifest()).unwrap();
        assert_eq!(loaded, records);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let good = serde_json::to_string(&record(&["hi"], "greet", &["O"])).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = load_corpus(&path, &manifest()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn tag_length_mismatch_reports_line_number() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut bad = record(&["a", "b"], "x", &["O", "O"]);
        bad.tags.pop();
        let line = serde_json::to_string(&bad).unwrap();
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_corpus(&path, &manifest()).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("tags"), "{err}");
    }

    #[test]
    fn profile_mismatch_reports_line_and_field() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut bad = record(&["a"], "x", &["O"]);
        bad.profile.up[0] = vec![0.5, 0.3, 0.2];
        let line = serde_json::to_string(&bad).unwrap();
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_corpus(&path, &manifest()).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("pref"), "{err}");
    }

    #[test]
    fn empty_file_loads_as_empty_list() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path, &manifest()).unwrap().is_empty());
    }

    #[test]
    fn vocab_orders_labels_lexicographically() {
        let records = vec![
            record(&["b", "a"], "beta", &["O", "B-zed"]),
            record(&["c"], "alpha", &["B-aa"]),
        ];
        let (tokens, labels) = build_vocab(&records).unwrap();
        assert_eq!(labels.intents, vec!["alpha", "beta"]);
        assert_eq!(labels.slot_types, vec!["aa", "zed"]);
        assert_eq!(labels.tagset, vec!["O", "B-aa", "I-aa", "B-zed", "I-zed"]);
        assert_eq!(labels.n_tags(), 2 * labels.n_slot_types() + 1);
        assert_eq!(tokens.id("a"), 2);
        assert_eq!(tokens.id("b"), 3);
        assert_eq!(tokens.id("c"), 4);
        assert_eq!(tokens.id("never-seen"), UNK_ID);
        assert_eq!(tokens.len(), 5);
    }

    #[test]
    fn single_slot_type_gives_three_tags() {
        let records = vec![record(&["x"], "only", &["B-city"])];
        let (_, labels) = build_vocab(&records).unwrap();
        assert_eq!(labels.tagset, vec!["O", "B-city", "I-city"]);
    }

    #[test]
    fn empty_corpus_cannot_build_vocab() {
        assert!(build_vocab(&[]).is_err());
    }

    #[test]
    fn unseen_labels_lookup_as_none() {
        let records = vec![record(&["x"], "a", &["B-t"])];
        let (_, labels) = build_vocab(&records).unwrap();
        assert_eq!(labels.intent_id("zzz"), None);
        assert_eq!(labels.tag_id("B-unknown"), None);
        assert_eq!(labels.tag_ids(&["O".into(), "B-unknown".into()]), None);
    }

    #[test]
    fn token_vocab_index_survives_serde() {
        let records = vec![record(&["alpha", "beta"], "a", &["O", "O"])];
        let (tokens, _) = build_vocab(&records).unwrap();
        let json = serde_json::to_string(&tokens).unwrap();
        let mut back: TokenVocab = serde_json::from_str(&json).unwrap();
        back.rebuild_index();
        assert_eq!(back.id("alpha"), tokens.id("alpha"));
        assert_eq!(back.id("missing"), UNK_ID);
    }
}
