//! JSON-lines storage for datasets and rationale annotations.
//!
//! One JSON object per line. Single-segment records are
//! `{"id", "text", "label"}`, pair records `{"id", "premise", "hypothesis",
//! "label"}`, and rationale sidecars `{"id", "rationale_word_indices"}`.
//! Fields are written in that order so save -> load -> save is byte-stable.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, TaskSchema};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    premise: Option<String>,
    #[serde(default)]
    hypothesis: Option<String>,
    label: String,
}

#[derive(Serialize)]
struct SingleRecord<'a> {
    id: &'a str,
    text: &'a str,
    label: &'a str,
}

#[derive(Serialize)]
struct PairRecord<'a> {
    id: &'a str,
    premise: &'a str,
    hypothesis: &'a str,
    label: &'a str,
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &TaskSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dataset = Dataset::new(schema.clone());
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: index + 1,
            message: e.to_string(),
        })?;
        let segments = if schema.pair_mode {
            match (&raw.premise, &raw.hypothesis) {
                (Some(p), Some(h)) => vec![p.clone(), h.clone()],
                _ => {
                    return Err(Error::schema(
                        &raw.id,
                        "pair-mode record needs both 'premise' and 'hypothesis'",
                    ))
                }
            }
        } else {
            match &raw.text {
                Some(t) => vec![t.clone()],
                None => return Err(Error::schema(&raw.id, "record is missing 'text'")),
            }
        };
        let label = schema
            .labels
            .by_name(&raw.label)
            .ok_or_else(|| {
                Error::schema(&raw.id, format!("unknown label '{}'", raw.label))
            })?
            .clone();
        dataset.push(Example::new(raw.id, segments, label)?)?;
    }
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for example in dataset.iter() {
        let line = if dataset.schema().pair_mode {
            serde_json::to_string(&PairRecord {
                id: example.id(),
                premise: &example.segments()[0],
                hypothesis: &example.segments()[1],
                label: example.label().name(),
            })?
        } else {
            serde_json::to_string(&SingleRecord {
                id: example.id(),
                text: &example.segments()[0],
                label: example.label().name(),
            })?
        };
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Golden rationales keyed by example id: the word indices (counted across
/// segments in order) that justify the example's label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleAnnotations {
    map: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: String,
    rationale_word_indices: Vec<usize>,
}

impl RationaleAnnotations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, mut indices: Vec<usize>) {
        indices.sort_unstable();
        indices.dedup();
        self.map.insert(id.into(), indices);
    }

    pub fn get(&self, id: &str) -> Option<&[usize]> {
        self.map.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

pub fn load_rationale_annotations(path: impl AsRef<Path>) -> Result<RationaleAnnotations> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = RationaleAnnotations::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: index + 1,
            message: e.to_string(),
        })?;
        out.insert(record.id, record.rationale_word_indices);
    }
    Ok(out)
}

pub fn save_rationale_annotations(
    annotations: &RationaleAnnotations,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (id, indices) in annotations.iter() {
        let record = AnnotationRecord {
            id: id.to_string(),
            rationale_word_indices: indices.to_vec(),
        };
        writeln!(out, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSet;

    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_schema() -> TaskSchema {
        TaskSchema::new(LabelSet::new(["neg", "pos"]).unwrap(), false)
    }

    fn pair_schema() -> TaskSchema {
        TaskSchema::new(LabelSet::new(["no", "yes"]).unwrap(), true)
    }

    #[test]
    fn loads_three_records_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"a\",\"text\":\"fine film\",\"label\":\"pos\"}\n",
                "{\"id\":\"b\",\"text\":\"dull film\",\"label\":\"neg\"}\n",
                "{\"id\":\"c\",\"text\":\"great cast\",\"label\":\"pos\"}\n",
            ),
        )
        .unwrap();
        let ds = load_dataset(&path, &single_schema()).unwrap();
        assert_eq!(ds.len(), 3);
        let ids: Vec<_> = ds.iter().map(|e| e.id().to_string()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(ds.get(0).unwrap().label().name(), "pos");
    }

    #[test]
    fn unknown_label_is_a_schema_error_naming_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\":\"weird\",\"text\":\"x y\",\"label\":\"meh\"}\n").unwrap();
        let err = load_dataset(&path, &single_schema()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("weird") && msg.contains("meh"), "{msg}");
    }

    #[test]
    fn malformed_json_reports_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"ok\",\"label\":\"pos\"}\nnot json at all\n",
        )
        .unwrap();
        let err = load_dataset(&path, &single_schema()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_pair_field_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairless.jsonl");
        std::fs::write(&path, "{\"id\":\"p1\",\"premise\":\"a b\",\"label\":\"yes\"}\n").unwrap();
        let err = load_dataset(&path, &pair_schema()).unwrap_err();
        assert!(err.to_string().contains("hypothesis"), "{err}");
    }

    #[test]
    fn pair_round_trip_is_byte_identical_over_random_records() {
        let schema = pair_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = ["alpha", "beta", "gamma", "delta", "omega"];
        let mut ds = Dataset::new(schema.clone());
        for i in 0..100 {
            let mut seg = || {
                let len = rng.gen_range(1..6);
                (0..len)
                    .map(|_| *vocab.choose(&mut rng).unwrap())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let premise = seg();
            let hypothesis = seg();
            let label = schema.labels.get(rng.gen_range(0..2)).unwrap().clone();
            ds.push(Example::new(format!("r{i:03}"), vec![premise, hypothesis], label).unwrap())
                .unwrap();
        }

        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("first.jsonl");
        let second = dir.path().join("second.jsonl");
        save_dataset(&ds, &first).unwrap();
        let reloaded = load_dataset(&first, &schema).unwrap();
        assert_eq!(reloaded, ds);
        save_dataset(&reloaded, &second).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }

    #[test]
    fn annotations_round_trip_and_normalize() {
        let mut ann = RationaleAnnotations::new();
        ann.insert("b", vec![3, 1, 3]);
        ann.insert("a", vec![0]);
        assert_eq!(ann.get("b").unwrap(), &[1, 3]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("golden.jsonl");
        save_rationale_annotations(&ann, &path).unwrap();
        let back = load_rationale_annotations(&path).unwrap();
        assert_eq!(back, ann);
    }
}
