//! Import the published ProSLU data files into the corpus format used
//! here.
//!
//! The importer is deliberately tolerant about surface layout because the
//! upstream files mix conventions. Accepted per split file:
//! a JSON object keyed by example id, a JSON array of records, or one
//! JSON record per line. Within a record the field mapping is:
//!
//! * tokens: `tokens`, `text`, `Text`, `words` or `utterance`; either an
//!   array of strings, a whitespace-separated string, or an unspaced
//!   string that is split into characters.
//! * tags: `tags`, `slots`, `Slots` or `labels`; array of strings or a
//!   whitespace-separated string.
//! * intent: `intent` or `Intent`; a string, or a one-element array.
//! * profile: `UP`/`up` and `CA`/`ca`; either an object mapping field
//!   names to vectors or an array of vectors. A vector is an array of
//!   numbers or an object whose values are numbers (read in sorted key
//!   order). Named fields are ordered by sorted name; positional fields
//!   get generated names.
//!
//! Any `KG` knowledge-graph payload is ignored. The profile manifest is
//! inferred from the data: a field is marked as a distribution when its
//! vector sums to 1 within 1e-6 in every record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::config::{ProfileField, ProfileKind, TrainConfig};
use crate::data::{save_corpus, CorpusRecord};
use crate::encoder::ProfileSet;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct ProsluImport {
    /// `(split name, records)` for every split file found.
    pub splits: Vec<(String, Vec<CorpusRecord>)>,
    pub manifest: Vec<ProfileField>,
}

/// Raw profile fields of one record before manifest inference.
struct RawProfile {
    up: Vec<(String, Vec<f64>)>,
    ca: Vec<(String, Vec<f64>)>,
}

fn field_err(split: &str, idx: usize, msg: impl std::fmt::Display) -> Error {
    Error::invalid(format!("{split} record {idx}: {msg}"))
}

fn get<'a>(obj: &'a Value, names: &[&str]) -> Option<&'a Value> {
    names.iter().find_map(|n| obj.get(n))
}

fn string_list(v: &Value, what: &str) -> Result<Vec<String>> {
    match v {
        Value::Array(items) => items
            .iter()
            .map(|it| {
                it.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::invalid(format!("{what}: non-string array entry")))
            })
            .collect(),
        Value::String(s) => {
            if s.split_whitespace().nth(1).is_some() {
                Ok(s.split_whitespace().map(str::to_string).collect())
            } else {
                Ok(s.chars().map(|c| c.to_string()).collect())
            }
        }
        _ => Err(Error::invalid(format!("{what}: expected array or string"))),
    }
}

fn number_vec(v: &Value, what: &str) -> Result<Vec<f64>> {
    let items: Vec<&Value> = match v {
        Value::Array(items) => items.iter().collect(),
        Value::Object(map) => {
            let sorted: BTreeMap<_, _> = map.iter().collect();
            sorted.into_values().collect()
        }
        _ => return Err(Error::invalid(format!("{what}: expected a numeric vector"))),
    };
    items
        .iter()
        .map(|it| {
            it.as_f64()
                .ok_or_else(|| Error::invalid(format!("{what}: non-numeric entry")))
        })
        .collect()
}

fn profile_block(v: Option<&Value>, prefix: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let Some(v) = v else { return Ok(Vec::new()) };
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<_, _> = map.iter().collect();
            sorted
                .into_iter()
                .map(|(name, vec)| Ok((name.clone(), number_vec(vec, name)?)))
                .collect()
        }
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(j, vec)| Ok((format!("{prefix}_{j}"), number_vec(vec, prefix)?)))
            .collect(),
        Value::Null => Ok(Vec::new()),
        _ => Err(Error::invalid(format!(
            "{prefix}: expected an object or array of vectors"
        ))),
    }
}

fn parse_record(v: &Value, split: &str, idx: usize) -> Result<(CorpusRecord, RawProfile)> {
    if !v.is_object() {
        return Err(field_err(split, idx, "record is not an object"));
    }
    let tokens = get(v, &["tokens", "text", "Text", "words", "utterance"])
        .ok_or_else(|| field_err(split, idx, "no token field"))
        .and_then(|t| string_list(t, "tokens").map_err(|e| field_err(split, idx, e)))?;
    let tags = get(v, &["tags", "slots", "Slots", "slot", "labels"])
        .ok_or_else(|| field_err(split, idx, "no slot tag field"))
        .and_then(|t| string_list(t, "tags").map_err(|e| field_err(split, idx, e)))?;
    let intent = match get(v, &["intent", "Intent", "intents"]) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(items)) if items.len() == 1 && items[0].is_string() => {
            items[0].as_str().unwrap().to_string()
        }
        Some(_) => return Err(field_err(split, idx, "intent is not a single string")),
        None => return Err(field_err(split, idx, "no intent field")),
    };
    let up = profile_block(get(v, &["UP", "up", "user_profile"]), "up")
        .map_err(|e| field_err(split, idx, e))?;
    let ca = profile_block(get(v, &["CA", "ca", "context_awareness"]), "ca")
        .map_err(|e| field_err(split, idx, e))?;
    let record = CorpusRecord {
        tokens,
        intent,
        tags,
        profile: ProfileSet {
            up: up.iter().map(|(_, v)| v.clone()).collect(),
            ca: ca.iter().map(|(_, v)| v.clone()).collect(),
        },
    };
    Ok((record, RawProfile { up, ca }))
}

/// Top-level record list of one split file, preserving a stable order:
/// object keys sort numerically where possible, then lexicographically.
fn split_values(text: &str, split: &str) -> Result<Vec<Value>> {
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        return match v {
            Value::Array(items) => Ok(items),
            Value::Object(map) => {
                let mut keyed: Vec<(String, Value)> = map.into_iter().collect();
                keyed.sort_by(|(a, _), (b, _)| match (a.parse::<u64>(), b.parse::<u64>()) {
                    (Ok(x), Ok(y)) => x.cmp(&y),
                    _ => a.cmp(b),
                });
                Ok(keyed.into_iter().map(|(_, v)| v).collect())
            }
            _ => Err(Error::invalid(format!(
                "{split}: top level is neither an object nor an array"
            ))),
        };
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| {
            Error::invalid(format!("{split} line {}: {e}", i + 1))
        })?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{split}: no records found")));
    }
    Ok(out)
}

struct FieldShape {
    name: String,
    dim: usize,
    distribution: bool,
}

fn infer_fields(
    kind: ProfileKind,
    rows: &[&Vec<(String, Vec<f64>)>],
    split: &str,
) -> Result<Vec<ProfileField>> {
    let Some(first) = rows.first() else { return Ok(Vec::new()) };
    let mut shapes: Vec<FieldShape> = first
        .iter()
        .map(|(name, vec)| FieldShape {
            name: name.clone(),
            dim: vec.len(),
            distribution: true,
        })
        .collect();
    for (idx, row) in rows.iter().enumerate() {
        if row.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "{split} record {idx}: {} profile fields, expected {}",
                row.len(),
                shapes.len()
            )));
        }
        for (shape, (name, vec)) in shapes.iter_mut().zip(row.iter()) {
            if *name != shape.name || vec.len() != shape.dim {
                return Err(Error::invalid(format!(
                    "{split} record {idx}: profile field {name:?} (dim {}) does not match {:?} (dim {})",
                    vec.len(),
                    shape.name,
                    shape.dim
                )));
            }
            let sum: f64 = vec.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || vec.iter().any(|&x| x < 0.0) {
                shape.distribution = false;
            }
        }
    }
    Ok(shapes
        .into_iter()
        .map(|s| ProfileField {
            kind,
            name: s.name,
            dim: s.dim,
            distribution: s.distribution,
        })
        .collect())
}

fn split_name_for(stem: &str) -> Option<&'static str> {
    let lower = stem.to_lowercase();
    if lower.contains("train") {
        Some("train")
    } else if lower.contains("dev") || lower.contains("valid") {
        Some("valid")
    } else if lower.contains("test") {
        Some("test")
    } else {
        None
    }
}

/// Find, parse and reshape the split files in `dir`.
pub fn import_proslu(dir: &Path) -> Result<ProsluImport> {
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", dir.display())))?
    {
        let path = entry?.path();
        let is_json = path
            .extension()
            .is_some_and(|e| e == "json" || e == "jsonl");
        if !is_json {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if let Some(name) = split_name_for(stem) {
            files.push((name.to_string(), path));
        }
    }
    if files.is_empty() {
        return Err(Error::invalid(format!(
            "no train/dev/test .json files found in {}",
            dir.display()
        )));
    }
    files.sort_by_key(|(name, _)| match name.as_str() {
        "train" => 0,
        "valid" => 1,
        _ => 2,
    });

    let mut splits = Vec::new();
    let mut raw_up: Vec<Vec<(String, Vec<f64>)>> = Vec::new();
    let mut raw_ca: Vec<Vec<(String, Vec<f64>)>> = Vec::new();
    for (name, path) in &files {
        let text = std::fs::read_to_string(path)?;
        let values = split_values(&text, name)?;
        let mut records = Vec::with_capacity(values.len());
        for (idx, value) in values.iter().enumerate() {
            let (record, raw) = parse_record(value, name, idx)?;
            if record.tokens.len() != record.tags.len() {
                return Err(field_err(
                    name,
                    idx,
                    format!(
                        "{} tokens vs {} tags",
                        record.tokens.len(),
                        record.tags.len()
                    ),
                ));
            }
            raw_up.push(raw.up);
            raw_ca.push(raw.ca);
            records.push(record);
        }
        splits.push((name.clone(), records));
    }

    let mut manifest = infer_fields(ProfileKind::Up, &raw_up.iter().collect::<Vec<_>>(), "corpus")?;
    manifest.extend(infer_fields(
        ProfileKind::Ca,
        &raw_ca.iter().collect::<Vec<_>>(),
        "corpus",
    )?);

    for (name, records) in &splits {
        for (idx, record) in records.iter().enumerate() {
            record
                .validate(&manifest)
                .map_err(|e| field_err(name, idx, e))?;
        }
    }
    Ok(ProsluImport { splits, manifest })
}

/// Import `in_dir` and write `<split>.jsonl` files plus a ready-to-edit
/// `config.toml` carrying the inferred profile manifest into `out_dir`.
/// Returns the per-split record counts in write order.
pub fn convert_proslu(in_dir: &Path, out_dir: &Path) -> Result<Vec<(String, usize)>> {
    let import = import_proslu(in_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let mut counts = Vec::new();
    for (name, records) in &import.splits {
        save_corpus(&out_dir.join(format!("{name}.jsonl")), records)?;
        counts.push((name.clone(), records.len()));
    }
    let mut config = TrainConfig::default();
    config.model.profile = import.manifest;
    config.save(&out_dir.join("config.toml"))?;
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_corpus;
    use tempfile::TempDir;

    fn write(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    const KEYED: &str = r#"{
        "102": {"text": "订 一 张 去 北京 的 机票",
                "slots": "O O O O B-city O O",
                "intent": "flight",
                "UP": {"transport": [0.9, 0.1], "media": {"music": 0.3, "video": 0.7}},
                "CA": [[0.2, 0.8]],
                "KG": {"ignored": true}},
        "7":   {"text": "听 歌",
                "slots": "O O",
                "intent": "music",
                "UP": {"transport": [0.5, 0.5], "media": {"music": 0.8, "video": 0.2}},
                "CA": [[1.0, 0.0]]}
    }"#;

    #[test]
    fn keyed_object_imports_with_numeric_key_order() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "train.json", KEYED);
        let import = import_proslu(dir.path()).unwrap();
        assert_eq!(import.splits.len(), 1);
        let (name, records) = &import.splits[0];
        assert_eq!(name, "train");
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].intent, "music");
        assert_eq!(records[1].intent, "flight");
        assert_eq!(records[1].tokens[4], "北京");
        assert_eq!(records[1].tags[4], "B-city");
        // media sorts before transport; its vector reads in music, video
        // key order.
        assert_eq!(import.manifest[0].name, "media");
        assert_eq!(records[1].profile.up[0], vec![0.3, 0.7]);
        assert!(import.manifest.iter().all(|f| f.distribution));
        assert_eq!(import.manifest[2].name, "ca_0");
        assert_eq!(import.manifest[2].kind, ProfileKind::Ca);
    }

    #[test]
    fn unspaced_text_splits_into_characters() {
        let dir = TempDir::new().unwrap();
        write(
            dir.path(),
            "test.json",
            r#"[{"text": "听歌", "slots": ["O", "O"], "intent": "music",
                "UP": [[1.0]], "CA": [[0.5, 0.5]]}]"#,
        );
        let import = import_proslu(dir.path()).unwrap();
        let records = &import.splits[0].1;
        assert_eq!(records[0].tokens, vec!["听", "歌"]);
    }

    #[test]
    fn json_lines_are_accepted() {
        let dir = TempDir::new().unwrap();
        write(
            dir.path(),
            "dev.jsonl",
            "{\"tokens\": [\"a\"], \"tags\": [\"O\"], \"intent\": \"x\", \"UP\": [[0.6, 0.4]], \"CA\": []}\n\
             {\"tokens\": [\"b\"], \"tags\": [\"O\"], \"intent\": \"y\", \"UP\": [[0.1, 0.9]], \"CA\": []}\n",
        );
        let import = import_proslu(dir.path()).unwrap();
        assert_eq!(import.splits[0].0, "valid");
        assert_eq!(import.splits[0].1.len(), 2);
    }

    #[test]
    fn non_distribution_vectors_clear_the_flag() {
        let dir = TempDir::new().unwrap();
        write(
            dir.path(),
            "train.json",
            r#"[{"tokens": ["a"], "tags": ["O"], "intent": "x",
                "UP": [[2.0, 3.0]], "CA": []}]"#,
        );
        let import = import_proslu(dir.path()).unwrap();
        assert!(!import.manifest[0].distribution);
    }

    #[test]
    fn tag_length_mismatch_names_split_and_record() {
        let dir = TempDir::new().unwrap();
        write(
            dir.path(),
            "train.json",
            r#"[{"tokens": ["a", "b"], "tags": ["O"], "intent": "x", "UP": [], "CA": []}]"#,
        );
        let err = import_proslu(dir.path()).unwrap_err().to_string();
        assert!(err.contains("train record 0"), "{err}");
    }

    #[test]
    fn inconsistent_profile_layout_is_rejected() {
        let dir = TempDir::new().unwrap();
        write(
            dir.path(),
            "train.json",
            r#"[{"tokens": ["a"], "tags": ["O"], "intent": "x", "UP": [[0.5, 0.5]], "CA": []},
                {"tokens": ["b"], "tags": ["O"], "intent": "x", "UP": [[0.2, 0.3, 0.5]], "CA": []}]"#,
        );
        assert!(import_proslu(dir.path()).is_err());
    }

    #[test]
    fn missing_split_files_are_reported() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "notes.txt", "not data");
        assert!(import_proslu(dir.path()).is_err());
    }

    #[test]
    fn converted_output_round_trips_through_load_corpus() {
        let dir = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        write(dir.path(), "train.json", KEYED);
        write(
            dir.path(),
            "test.json",
            r#"[{"text": "听 歌", "slots": "O O", "intent": "music",
                "UP": {"transport": [1.0, 0.0], "media": {"music": 1.0, "video": 0.0}},
                "CA": [[0.4, 0.6]]}]"#,
        );
        let counts = convert_proslu(dir.path(), out.path()).unwrap();
        assert_eq!(counts, vec![("train".to_string(), 2), ("test".to_string(), 1)]);
        let config = TrainConfig::load(&out.path().join("config.toml")).unwrap();
        assert_eq!(config.model.profile.len(), 3);
        let train = load_corpus(&out.path().join("train.jsonl"), &config.model.profile).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train[1].profile.ca[0], vec![0.2, 0.8]);
    }
}
