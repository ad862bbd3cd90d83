//! A synthetic classification task with known ground truth.
//!
//! Each example is a sequence of filler words containing a small number of
//! trigger words; the label is decided by which label's triggers occur most
//! often, so a rule-based oracle can relabel any text, including generated
//! ones. Trigger positions double as golden rationales. Optionally one
//! spurious token co-occurs with a chosen label with high probability in the
//! train/dev/test_id splits and with low probability in test_ood, which gives
//! classifiers a shortcut that stops working out of distribution.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Dataset, Example, Label, LabelSet, RationaleAnnotations, TaskSchema,
};
use crate::derive_seed;
use crate::error::{Error, Result};

/// Number of examples per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test_id: usize,
    pub test_ood: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 2000,
            dev: 400,
            test_id: 400,
            test_ood: 400,
        }
    }
}

/// A token planted to correlate with one label in-distribution and against it
/// out of distribution. `train_correlation` is the probability that the
/// token's presence agrees with the label in train/dev/test_id;
/// `ood_correlation` plays the same role in test_ood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousToken {
    pub token: String,
    pub label: String,
    #[serde(default = "default_train_correlation")]
    pub train_correlation: f64,
    #[serde(default = "default_ood_correlation")]
    pub ood_correlation: f64,
}

fn default_train_correlation() -> f64 {
    0.95
}

fn default_ood_correlation() -> f64 {
    0.05
}

/// Full description of a synthetic task. Generation is a pure function of
/// this struct, so equal specs produce byte-identical corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub labels: Vec<String>,
    /// Label name -> trigger words. Sets must be pairwise disjoint.
    pub triggers: BTreeMap<String, Vec<String>>,
    #[serde(default = "default_filler_count")]
    pub filler_count: usize,
    /// Inclusive range of words per segment.
    #[serde(default = "default_words_per_segment")]
    pub words_per_segment: (usize, usize),
    #[serde(default = "default_triggers_per_example")]
    pub triggers_per_example: usize,
    /// Extra trigger words planted from other labels' lists. The majority
    /// family still decides the label, so a classifier cannot score well
    /// while ignoring any one family outright; that keeps every label's
    /// triggers load-bearing, which gradient saliency depends on.
    #[serde(default)]
    pub distractor_triggers: usize,
    #[serde(default)]
    pub pair_mode: bool,
    #[serde(default)]
    pub spurious: Option<SpuriousToken>,
    #[serde(default)]
    pub counts: SplitCounts,
    #[serde(default = "default_task_seed")]
    pub seed: u64,
}

fn default_filler_count() -> usize {
    180
}

fn default_words_per_segment() -> (usize, usize) {
    (8, 12)
}

fn default_triggers_per_example() -> usize {
    1
}

fn default_task_seed() -> u64 {
    7
}

/// The generated corpus: four splits plus golden rationales for every
/// example (the trigger word positions, indexed across segments in order).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub schema: TaskSchema,
    pub train: Dataset,
    pub dev: Dataset,
    pub test_id: Dataset,
    pub test_ood: Dataset,
    pub golden: RationaleAnnotations,
}

impl SyntheticCorpus {
    pub fn split(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test_id" => Some(&self.test_id),
            "test_ood" => Some(&self.test_ood),
            _ => None,
        }
    }

    /// The rationale percentage that matches the planted trigger density:
    /// (mean golden words per train example / mean words per train example)
    /// * 100.
    pub fn suggested_pi(&self) -> f64 {
        let mut golden_words = 0usize;
        let mut total_words = 0usize;
        for example in self.train.iter() {
            golden_words += self.golden.get(example.id()).map_or(0, <[usize]>::len);
            total_words += example
                .segments()
                .iter()
                .map(|s| s.split_whitespace().count())
                .sum::<usize>();
        }
        100.0 * golden_words as f64 / total_words as f64
    }
}

impl SyntheticTask {
    /// Two-label task with sentiment-flavored trigger words and defaults
    /// suitable for the test suite. No spurious token.
    pub fn binary(seed: u64) -> Self {
        let mut triggers = BTreeMap::new();
        triggers.insert(
            "neg".to_string(),
            ["awful", "dreadful", "lousy", "tedious", "grim", "dire"]
                .map(String::from)
                .to_vec(),
        );
        triggers.insert(
            "pos".to_string(),
            ["great", "superb", "lovely", "charming", "stellar", "radiant"]
                .map(String::from)
                .to_vec(),
        );
        SyntheticTask {
            labels: vec!["neg".into(), "pos".into()],
            triggers,
            filler_count: default_filler_count(),
            words_per_segment: default_words_per_segment(),
            triggers_per_example: 1,
            distractor_triggers: 0,
            pair_mode: false,
            spurious: None,
            counts: SplitCounts::default(),
            seed,
        }
    }

    /// Three-label variant; the extra label makes multi-target flipping and
    /// label-specific retraining losses meaningful.
    pub fn three_class(seed: u64) -> Self {
        let mut task = SyntheticTask::binary(seed);
        task.labels = vec!["neg".into(), "neu".into(), "pos".into()];
        task.triggers.insert(
            "neu".to_string(),
            ["plain", "routine", "typical", "modest", "average", "mild"]
                .map(String::from)
                .to_vec(),
        );
        task
    }

    /// Plant `majority` triggers of the example's label and `distractors`
    /// triggers drawn from the other labels' lists in every example.
    pub fn with_distractors(mut self, majority: usize, distractors: usize) -> Self {
        self.triggers_per_example = majority;
        self.distractor_triggers = distractors;
        self
    }

    /// Attach the default spurious token, correlated with `label`.
    pub fn with_spurious(mut self, label: &str) -> Self {
        self.spurious = Some(SpuriousToken {
            token: "cinema".into(),
            label: label.into(),
            train_correlation: default_train_correlation(),
            ood_correlation: default_ood_correlation(),
        });
        self
    }

    pub fn label_set(&self) -> Result<LabelSet> {
        LabelSet::new(self.labels.iter().cloned())
    }

    pub fn schema(&self) -> Result<TaskSchema> {
        Ok(TaskSchema::new(self.label_set()?, self.pair_mode))
    }

    fn filler_words(&self) -> Vec<String> {
        (0..self.filler_count).map(|i| format!("w{i:03}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.label_set()?;
        if self.triggers_per_example == 0 {
            return Err(Error::InvalidConfig(
                "triggers_per_example must be at least 1".into(),
            ));
        }
        if self.filler_count == 0 {
            return Err(Error::InvalidConfig("filler_count must be positive".into()));
        }
        let (lo, hi) = self.words_per_segment;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "words_per_segment range ({lo}, {hi}) is not a valid inclusive range"
            )));
        }
        if self.distractor_triggers >= self.triggers_per_example {
            return Err(Error::InvalidConfig(format!(
                "{} distractor trigger(s) against {} of the label's own would let \
                 a single other family tie or win the majority",
                self.distractor_triggers, self.triggers_per_example
            )));
        }
        let reserved = self.triggers_per_example
            + self.distractor_triggers
            + usize::from(self.spurious.is_some());
        if lo <= reserved {
            return Err(Error::InvalidConfig(format!(
                "segments of {lo} words cannot hold {reserved} planted word(s) plus fillers"
            )));
        }

        let filler_set: BTreeSet<String> = self.filler_words().into_iter().collect();

        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for name in labels.names() {
            let words = self
                .triggers
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("label '{name}' has no triggers")))?;
            if words.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "label '{name}' has an empty trigger list"
                )));
            }
            for word in words {
                if word.split_whitespace().count() != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "trigger '{word}' must be a single word"
                    )));
                }
                if let Some(other) = seen.insert(word, name) {
                    return Err(Error::InvalidConfig(format!(
                        "trigger '{word}' appears under both '{other}' and '{name}'"
                    )));
                }
                if filler_set.contains(word) {
                    return Err(Error::InvalidConfig(format!(
                        "trigger '{word}' collides with the filler vocabulary"
                    )));
                }
            }
        }
        for extra in self.triggers.keys() {
            if labels.by_name(extra).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "triggers listed for unknown label '{extra}'"
                )));
            }
        }
        if let Some(spurious) = &self.spurious {
            if labels.by_name(&spurious.label).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "spurious token targets unknown label '{}'",
                    spurious.label
                )));
            }
            if seen.contains_key(spurious.token.as_str())
                || filler_set.contains(&spurious.token)
            {
                return Err(Error::InvalidConfig(
                    "spurious token must be distinct from triggers and fillers".into(),
                ));
            }
            for corr in [spurious.train_correlation, spurious.ood_correlation] {
                if !(0.0..=1.0).contains(&corr) {
                    return Err(Error::InvalidConfig(format!(
                        "spurious correlation {corr} is outside [0, 1]"
                    )));
                }
            }
        }
        for (name, count) in [
            ("train", self.counts.train),
            ("dev", self.counts.dev),
            ("test_id", self.counts.test_id),
            ("test_ood", self.counts.test_ood),
        ] {
            if count == 0 {
                return Err(Error::InvalidConfig(format!("split '{name}' is empty")));
            }
        }
        Ok(())
    }

    /// Generate all four splits plus golden rationales.
    pub fn generate(&self) -> Result<SyntheticCorpus> {
        self.validate()?;
        let schema = self.schema()?;
        let fillers = self.filler_words();
        let mut golden = RationaleAnnotations::new();

        let splits = [
            ("train", self.counts.train, false),
            ("dev", self.counts.dev, false),
            ("test_id", self.counts.test_id, false),
            ("test_ood", self.counts.test_ood, true),
        ];
        let mut datasets = Vec::new();
        for (split, count, ood) in splits {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["corpus", split]));
            let mut dataset = Dataset::new(schema.clone());
            for i in 0..count {
                let label = schema.labels.get(i % schema.labels.len()).unwrap().clone();
                let (example, rationale) =
                    self.render_example(&schema, &fillers, split, i, &label, ood, &mut rng)?;
                debug_assert_eq!(oracle_label(&example, self)?.id(), label.id());
                golden.insert(example.id().to_string(), rationale);
                dataset.push(example)?;
            }
            datasets.push(dataset);
        }
        let mut it = datasets.into_iter();
        Ok(SyntheticCorpus {
            schema,
            train: it.next().unwrap(),
            dev: it.next().unwrap(),
            test_id: it.next().unwrap(),
            test_ood: it.next().unwrap(),
            golden,
        })
    }

    fn render_example(
        &self,
        schema: &TaskSchema,
        fillers: &[String],
        split: &str,
        index: usize,
        label: &Label,
        ood: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Example, Vec<usize>)> {
        let (lo, hi) = self.words_per_segment;
        let segment_count = schema.segment_count();
        // Triggers (and the spurious token) live in the last segment; for
        // pair tasks that is the hypothesis.
        let trigger_segment = segment_count - 1;

        let mut segments = Vec::with_capacity(segment_count);
        let mut rationale = Vec::new();
        let mut offset = 0usize;
        for seg in 0..segment_count {
            let len = rng.gen_range(lo..=hi);
            let mut words: Vec<String> = (0..len)
                .map(|_| fillers.choose(rng).unwrap().clone())
                .collect();
            if seg == trigger_segment {
                let trigger_list = &self.triggers[label.name()];
                let mut positions: Vec<usize> = (0..len).collect();
                positions.shuffle(rng);
                let trigger_positions: Vec<usize> =
                    positions.drain(..self.triggers_per_example).collect();
                for &pos in &trigger_positions {
                    words[pos] = trigger_list.choose(rng).unwrap().clone();
                    rationale.push(offset + pos);
                }
                let other_labels: Vec<&String> =
                    self.labels.iter().filter(|l| *l != label.name()).collect();
                for _ in 0..self.distractor_triggers {
                    let family = other_labels.choose(rng).expect("validated label count");
                    let pos = positions.pop().expect("validated segment length");
                    words[pos] = self.triggers[family.as_str()].choose(rng).unwrap().clone();
                    rationale.push(offset + pos);
                }
                if let Some(spurious) = &self.spurious {
                    let correlation = if ood {
                        spurious.ood_correlation
                    } else {
                        spurious.train_correlation
                    };
                    let aligned = rng.gen_bool(correlation);
                    let wants_token = label.name() == spurious.label;
                    if aligned == wants_token {
                        let pos = positions.pop().expect("validated segment length");
                        words[pos] = spurious.token.clone();
                    }
                }
            }
            offset += len;
            segments.push(words.join(" "));
        }
        rationale.sort_unstable();
        let example = Example::new(format!("{split}-{index:05}"), segments, label.clone())?;
        Ok((example, rationale))
    }
}

/// Fast lookup from word to the label whose trigger list contains it.
#[derive(Debug, Clone)]
pub struct TriggerOracle {
    word_to_label: HashMap<String, usize>,
    label_count: usize,
}

impl TriggerOracle {
    pub fn new(task: &SyntheticTask) -> Result<Self> {
        let labels = task.label_set()?;
        let mut word_to_label = HashMap::new();
        for label in labels.iter() {
            if let Some(words) = task.triggers.get(label.name()) {
                for word in words {
                    word_to_label.insert(word.clone(), label.id());
                }
            }
        }
        Ok(TriggerOracle {
            word_to_label,
            label_count: labels.len(),
        })
    }

    pub fn trigger_counts<'a>(&self, words: impl Iterator<Item = &'a str>) -> Vec<usize> {
        let mut counts = vec![0usize; self.label_count];
        for word in words {
            if let Some(&label) = self.word_to_label.get(word) {
                counts[label] += 1;
            }
        }
        counts
    }

    /// The label whose triggers dominate, or `None` on a tie (including the
    /// all-zero case).
    pub fn judge<'a>(&self, words: impl Iterator<Item = &'a str>) -> Option<usize> {
        let counts = self.trigger_counts(words);
        let best = *counts.iter().max()?;
        let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
        let (label, _) = winners.next()?;
        if winners.next().is_some() {
            None
        } else {
            Some(label)
        }
    }

    pub fn judge_segments(&self, segments: &[String]) -> Option<usize> {
        self.judge(segments.iter().flat_map(|s| s.split_whitespace()))
    }
}

/// Relabel an example by the trigger-majority rule. A tie means the text has
/// no defined synthetic label, which for corpus data is a consistency bug.
pub fn oracle_label(example: &Example, task: &SyntheticTask) -> Result<Label> {
    let oracle = TriggerOracle::new(task)?;
    let labels = task.label_set()?;
    match oracle.judge_segments(example.segments()) {
        Some(id) => Ok(labels.get(id).unwrap().clone()),
        None => Err(Error::Inconsistency(format!(
            "oracle tie for example '{}': no single label's triggers dominate",
            example.id()
        ))),
    }
}

/// Fraction of examples containing `token` whose label is `label`. Returns
/// `None` when the token never occurs.
pub fn label_rate_given_token(dataset: &Dataset, token: &str, label: &str) -> Option<f64> {
    let mut present = 0usize;
    let mut matching = 0usize;
    for example in dataset.iter() {
        let has = example
            .segments()
            .iter()
            .flat_map(|s| s.split_whitespace())
            .any(|w| w == token);
        if has {
            present += 1;
            if example.label().name() == label {
                matching += 1;
            }
        }
    }
    if present == 0 {
        None
    } else {
        Some(matching as f64 / present as f64)
    }
}
