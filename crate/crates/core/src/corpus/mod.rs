//! Labeled text corpora: label sets, examples, datasets, JSON-lines storage,
//! tokenization, and the synthetic trigger-word task used for verification.

mod io;
pub mod synthetic;
mod tokenize;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_dataset, load_rationale_annotations, save_dataset, save_rationale_annotations,
    RationaleAnnotations,
};
pub use synthetic::{
    label_rate_given_token, oracle_label, SplitCounts, SpuriousToken, SyntheticCorpus,
    SyntheticTask, TriggerOracle,
};
pub use tokenize::{
    tokenize_dataset, ChunkTokenizer, TokenizedDataset, TokenizedExample, TokenizedText,
    Tokenizer, WhitespaceTokenizer, MASK_TOKEN,
};

/// A class label. The id is the label's position in its [`LabelSet`], so ids
/// are dense and start at zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    id: usize,
    name: String,
}

impl Label {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// The ordered set of labels a task distinguishes. At least two, unique
/// non-empty names, ids contiguous from zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<Label>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut labels = Vec::new();
        let mut seen = BTreeSet::new();
        for name in names {
            let name = name.into();
            if name.trim().is_empty() {
                return Err(Error::InvalidInput("label names must be non-empty".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidInput(format!("duplicate label '{name}'")));
            }
            labels.push(Label {
                id: labels.len(),
                name,
            });
        }
        if labels.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a task needs at least two labels, got {}",
                labels.len()
            )));
        }
        Ok(LabelSet { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Label> {
        self.labels.get(id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Label> {
        self.labels.iter().find(|l| l.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Label> {
        self.labels.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.name.as_str())
    }
}

/// What a dataset file is expected to contain: its label inventory and
/// whether records are single texts or premise/hypothesis pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchema {
    pub labels: LabelSet,
    pub pair_mode: bool,
}

impl TaskSchema {
    pub fn new(labels: LabelSet, pair_mode: bool) -> Self {
        TaskSchema { labels, pair_mode }
    }

    pub fn segment_count(&self) -> usize {
        if self.pair_mode {
            2
        } else {
            1
        }
    }
}

/// One labeled text. Single-segment tasks have one segment; pair tasks have
/// two (premise, hypothesis). Segments are never empty or whitespace-only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    id: String,
    segments: Vec<String>,
    label: Label,
}

impl Example {
    pub fn new(id: impl Into<String>, segments: Vec<String>, label: Label) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidInput("example id must be non-empty".into()));
        }
        if segments.is_empty() || segments.len() > 2 {
            return Err(Error::schema(
                &id,
                format!("expected 1 or 2 segments, got {}", segments.len()),
            ));
        }
        for (i, seg) in segments.iter().enumerate() {
            if seg.trim().is_empty() {
                return Err(Error::schema(&id, format!("segment {i} is empty")));
            }
        }
        Ok(Example {
            id,
            segments,
            label,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn label(&self) -> &Label {
        &self.label
    }
}

/// An ordered collection of examples under one schema. Insertion rejects
/// duplicate ids, labels outside the schema, and segment-count mismatches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    schema: TaskSchema,
    examples: Vec<Example>,
    ids: BTreeSet<String>,
}

impl Dataset {
    pub fn new(schema: TaskSchema) -> Self {
        Dataset {
            schema,
            examples: Vec::new(),
            ids: BTreeSet::new(),
        }
    }

    pub fn from_examples(schema: TaskSchema, examples: Vec<Example>) -> Result<Self> {
        let mut dataset = Dataset::new(schema);
        for example in examples {
            dataset.push(example)?;
        }
        Ok(dataset)
    }

    pub fn push(&mut self, example: Example) -> Result<()> {
        if example.segments.len() != self.schema.segment_count() {
            return Err(Error::schema(
                example.id(),
                format!(
                    "expected {} segment(s), got {}",
                    self.schema.segment_count(),
                    example.segments.len()
                ),
            ));
        }
        match self.schema.labels.get(example.label.id()) {
            Some(known) if *known == example.label => {}
            _ => {
                return Err(Error::schema(
                    example.id(),
                    format!("label '{}' is not in the task schema", example.label),
                ))
            }
        }
        if !self.ids.insert(example.id.clone()) {
            return Err(Error::schema(example.id(), "duplicate id"));
        }
        self.examples.push(example);
        Ok(())
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn labels(&self) -> &LabelSet {
        &self.schema.labels
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter()
    }

    pub fn get(&self, index: usize) -> Option<&Example> {
        self.examples.get(index)
    }

    pub fn by_id(&self, id: &str) -> Option<&Example> {
        // Linear scan; datasets here are a few thousand records.
        self.examples.iter().find(|e| e.id == id)
    }
}
