//! Masking-noise probe for rationale quality.
//!
//! If the selected words really carry the signal, corrupting them should
//! hurt a retrained classifier more than corrupting the same share of the
//! remaining words. This module masks a percentage of rationale or
//! non-rationale subtokens, retrains a fresh classifier per condition, and
//! tabulates accuracy per evaluation set and seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedDataset, TokenizedExample, TokenizedText, MASK_TOKEN};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::modelkit::{
    accuracy, train_classifier, ClassifierDims, ReferenceClassifier, TrainConfig, Vocab,
};
use crate::rationale::RationaleSelection;

/// Which word set gets corrupted in a condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    Rationales,
    NonRationales,
}

impl MaskTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskTarget::Rationales => "rationales",
            MaskTarget::NonRationales => "non_rationales",
        }
    }
}

/// Settings for one noise run. `train` is a template; its seed is replaced
/// per condition so every retrain gets its own derived stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Percent of the targeted subtokens to mask, e.g. `[20, 40, 60, 80]`.
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    /// An example takes part only if its rationale covers strictly more
    /// subtokens than this, so both conditions compare on texts long enough
    /// to corrupt meaningfully.
    pub min_rationale_subtokens: usize,
    pub train: TrainConfig,
    pub dims: ClassifierDims,
}

impl NoiseConfig {
    pub fn new(train: TrainConfig) -> Self {
        NoiseConfig {
            ratios: vec![20.0, 40.0, 60.0, 80.0],
            seeds: vec![1, 2, 3],
            min_rationale_subtokens: 9,
            train,
            dims: ClassifierDims::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::InvalidConfig("no mask ratios given".into()));
        }
        for &r in &self.ratios {
            if !r.is_finite() || !(0.0..=100.0).contains(&r) {
                return Err(Error::InvalidConfig(format!(
                    "mask ratio must lie in [0, 100], got {r}"
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("no seeds given".into()));
        }
        self.train.validate()
    }
}

/// One accuracy measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub target: MaskTarget,
    pub ratio: f64,
    pub eval_set: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// Full grid of measurements plus the eligibility tally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTable {
    pub rows: Vec<NoiseRow>,
    pub eligible: usize,
    pub total: usize,
}

impl NoiseTable {
    /// Mean accuracy across seeds for one cell of the grid.
    pub fn mean_accuracy(&self, target: MaskTarget, ratio: f64, eval_set: &str) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in &self.rows {
            if row.target == target && row.ratio == ratio && row.eval_set == eval_set {
                sum += row.accuracy;
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,ratio,eval_set,seed,accuracy\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.target.as_str(),
                row.ratio,
                row.eval_set,
                row.seed,
                row.accuracy
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// How many positions a ratio masks out of `len`: the nearest integer to
/// `ratio% of len`, capped at `len`.
pub fn mask_count(ratio: f64, len: usize) -> usize {
    ((ratio / 100.0 * len as f64).round() as usize).min(len)
}

/// Copy of `text` with the given subtoken positions replaced by the mask
/// placeholder. Word boundaries stay as they were.
pub fn mask_subtokens(text: &TokenizedText, positions: &[usize]) -> TokenizedText {
    let mut masked = text.clone();
    for &pos in positions {
        if let Some(slot) = masked.subtokens.get_mut(pos) {
            *slot = MASK_TOKEN.to_string();
        }
    }
    masked
}

/// Subtoken positions covered by the selected words, ascending.
fn rationale_positions(text: &TokenizedText, word_indices: &[usize]) -> Vec<usize> {
    let mut positions = Vec::new();
    for &word in word_indices {
        if let Some(range) = text.subtoken_range(word) {
            positions.extend(range);
        }
    }
    positions.sort_unstable();
    positions.dedup();
    positions
}

struct EligibleExample<'a> {
    example: &'a TokenizedExample,
    rationale: Vec<usize>,
    complement: Vec<usize>,
}

fn collect_eligible<'a>(
    train: &'a TokenizedDataset,
    selections: &[RationaleSelection],
    floor: usize,
) -> Result<Vec<EligibleExample<'a>>> {
    let by_id: std::collections::HashMap<&str, &RationaleSelection> = selections
        .iter()
        .map(|s| (s.id.as_str(), s))
        .collect();
    let mut eligible = Vec::new();
    for example in train.iter() {
        let Some(selection) = by_id.get(example.id.as_str()) else {
            continue;
        };
        if selection.skipped {
            continue;
        }
        let rationale = rationale_positions(&example.text, &selection.word_indices);
        if rationale.len() <= floor {
            continue;
        }
        let complement: Vec<usize> = (0..example.text.n())
            .filter(|pos| !rationale.contains(pos))
            .collect();
        eligible.push(EligibleExample {
            example,
            rationale,
            complement,
        });
    }
    if eligible.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no example carries more than {floor} rationale subtokens"
        )));
    }
    Ok(eligible)
}

fn masked_dataset(
    eligible: &[EligibleExample<'_>],
    target: MaskTarget,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> TokenizedDataset {
    let mut items = Vec::with_capacity(eligible.len());
    for entry in eligible {
        let pool = match target {
            MaskTarget::Rationales => &entry.rationale,
            MaskTarget::NonRationales => &entry.complement,
        };
        let count = mask_count(ratio, pool.len());
        let chosen: Vec<usize> = if count == 0 {
            Vec::new()
        } else {
            rand::seq::index::sample(rng, pool.len(), count)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        items.push(TokenizedExample {
            id: entry.example.id.clone(),
            text: mask_subtokens(&entry.example.text, &chosen),
            label: entry.example.label.clone(),
        });
    }
    TokenizedDataset { items }
}

fn label_count_of(sets: &[&TokenizedDataset]) -> usize {
    sets.iter()
        .flat_map(|set| set.iter())
        .map(|item| item.label.id() + 1)
        .max()
        .unwrap_or(0)
}

/// Retrain a fresh classifier per (target, ratio, seed) condition on the
/// masked training data and measure accuracy on each evaluation set. The
/// evaluation sets stay unmasked.
pub fn noise_experiment(
    train: &TokenizedDataset,
    dev: &TokenizedDataset,
    selections: &[RationaleSelection],
    eval_sets: &[(String, &TokenizedDataset)],
    config: &NoiseConfig,
) -> Result<NoiseTable> {
    config.validate()?;
    if eval_sets.is_empty() {
        return Err(Error::InvalidConfig("no evaluation sets given".into()));
    }
    let eligible = collect_eligible(train, selections, config.min_rationale_subtokens)?;
    let label_count = label_count_of(&[train, dev]);
    let segment_count = eligible[0].example.text.segment_count;

    let mut rows = Vec::new();
    for &target in &[MaskTarget::Rationales, MaskTarget::NonRationales] {
        for &ratio in &config.ratios {
            let ratio_tag = format!("{ratio}");
            for &seed in &config.seeds {
                let mask_seed =
                    derive_seed(seed, &["noise-mask", target.as_str(), &ratio_tag]);
                let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let masked = masked_dataset(&eligible, target, ratio, &mut rng);

                let vocab = Vocab::build(
                    [MASK_TOKEN],
                    masked
                        .iter()
                        .flat_map(|item| item.text.subtokens.iter().map(String::as_str)),
                );
                // Init and shuffle streams deliberately exclude the target,
                // so paired conditions differ only in which tokens were
                // corrupted.
                let init_seed = derive_seed(seed, &["noise-init", &ratio_tag]);
                let mut clf = ReferenceClassifier::new(
                    vocab,
                    label_count,
                    segment_count,
                    config.dims,
                    init_seed,
                )?;
                let mut train_cfg = config.train.clone();
                train_cfg.seed = derive_seed(seed, &["noise-train", &ratio_tag]);
                train_classifier(&masked, dev, &train_cfg, &mut clf)?;

                for (name, set) in eval_sets {
                    rows.push(NoiseRow {
                        target,
                        ratio,
                        eval_set: name.clone(),
                        seed,
                        accuracy: accuracy(&clf, set)?,
                    });
                }
            }
        }
    }
    Ok(NoiseTable {
        rows,
        eligible: eligible.len(),
        total: train.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize_dataset, SplitCounts, SyntheticTask, WhitespaceTokenizer};
    use crate::rationale::extract_rationales;

    fn toy_selection(id: &str, words: Vec<usize>) -> RationaleSelection {
        RationaleSelection {
            id: id.into(),
            word_indices: words,
            pi: 50.0,
            skipped: false,
        }
    }

    fn small_corpus(seed: u64) -> crate::corpus::SyntheticCorpus {
        let mut task = SyntheticTask::binary(seed);
        task.counts = SplitCounts {
            train: 40,
            dev: 20,
            test_id: 10,
            test_ood: 10,
        };
        task.generate().unwrap()
    }

    #[test]
    fn mask_count_rounds_to_nearest() {
        assert_eq!(mask_count(40.0, 10), 4);
        assert_eq!(mask_count(20.0, 2), 0);
        assert_eq!(mask_count(25.0, 10), 3);
        assert_eq!(mask_count(0.0, 50), 0);
        assert_eq!(mask_count(100.0, 7), 7);
    }

    #[test]
    fn masking_replaces_exactly_the_chosen_positions() {
        let text = crate::corpus::Tokenizer::tokenize_align(
            &WhitespaceTokenizer,
            &["a b c d e".to_string()],
        )
        .unwrap();
        let masked = mask_subtokens(&text, &[1, 3]);
        assert_eq!(masked.subtokens, vec!["a", MASK_TOKEN, "c", MASK_TOKEN, "e"]);
        assert_eq!(masked.words, text.words);
        assert_eq!(mask_subtokens(&text, &[]).subtokens, text.subtokens);
    }

    #[test]
    fn short_rationales_are_filtered_out() {
        let corpus = small_corpus(11);
        let train = tokenize_dataset(&corpus.train, &WhitespaceTokenizer).unwrap();
        let selections: Vec<RationaleSelection> = train
            .iter()
            .map(|item| toy_selection(&item.id, vec![0]))
            .collect();
        let config = NoiseConfig::new(TrainConfig::classifier_default(1));
        let err = noise_experiment(
            &train,
            &train,
            &selections,
            &[("dev".to_string(), &train)],
            &config,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn grid_rows_cover_every_condition_and_rerun_identically() {
        let corpus = small_corpus(7);
        let train = tokenize_dataset(&corpus.train, &WhitespaceTokenizer).unwrap();
        let dev = tokenize_dataset(&corpus.dev, &WhitespaceTokenizer).unwrap();
        let selections: Vec<RationaleSelection> = train
            .iter()
            .map(|item| {
                let m = item.text.m();
                toy_selection(&item.id, (0..m.min(12)).collect())
            })
            .collect();
        let mut config = NoiseConfig::new(TrainConfig {
            max_epochs: 1,
            ..TrainConfig::classifier_default(1)
        });
        config.ratios = vec![0.0, 50.0];
        config.seeds = vec![1];
        let evals = [("dev".to_string(), &dev)];
        let table = noise_experiment(&train, &dev, &selections, &evals, &config).unwrap();
        assert_eq!(table.rows.len(), 2 * 2);
        assert!(table.eligible > 0);
        assert_eq!(table.total, train.len());
        assert!(table
            .mean_accuracy(MaskTarget::Rationales, 0.0, "dev")
            .is_some());

        let again = noise_experiment(&train, &dev, &selections, &evals, &config).unwrap();
        assert_eq!(again, table);

        let csv = table.to_csv();
        assert!(csv.starts_with("target,ratio,eval_set,seed,accuracy\n"));
        assert_eq!(csv.lines().count(), 1 + table.rows.len());
    }

    #[test]
    fn unmasked_conditions_match_for_both_targets() {
        let corpus = small_corpus(3);
        let train = tokenize_dataset(&corpus.train, &WhitespaceTokenizer).unwrap();
        let dev = tokenize_dataset(&corpus.dev, &WhitespaceTokenizer).unwrap();
        let clf_cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::classifier_default(5)
        };
        let selections: Vec<RationaleSelection> = train
            .iter()
            .map(|item| {
                let m = item.text.m();
                toy_selection(&item.id, (0..m.min(11)).collect())
            })
            .collect();
        let mut config = NoiseConfig::new(clf_cfg);
        config.ratios = vec![0.0];
        config.seeds = vec![9];
        let evals = [("dev".to_string(), &dev)];
        let table = noise_experiment(&train, &dev, &selections, &evals, &config).unwrap();
        let a = table
            .mean_accuracy(MaskTarget::Rationales, 0.0, "dev")
            .unwrap();
        let b = table
            .mean_accuracy(MaskTarget::NonRationales, 0.0, "dev")
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extraction_feeds_the_experiment_end_to_end() {
        let corpus = small_corpus(21);
        let train = tokenize_dataset(&corpus.train, &WhitespaceTokenizer).unwrap();
        let dev = tokenize_dataset(&corpus.dev, &WhitespaceTokenizer).unwrap();
        let vocab = Vocab::build(
            [MASK_TOKEN],
            train
                .iter()
                .flat_map(|item| item.text.subtokens.iter().map(String::as_str)),
        );
        let mut clf = ReferenceClassifier::new(
            vocab,
            2,
            1,
            ClassifierDims::default(),
            derive_seed(21, &["clf-init"]),
        )
        .unwrap();
        let clf_cfg = TrainConfig {
            max_epochs: 4,
            ..TrainConfig::classifier_default(21)
        };
        train_classifier(&train, &dev, &clf_cfg, &mut clf).unwrap();
        let (selections, report) = extract_rationales(&clf, &train, 90.0).unwrap();
        assert!(report.kept > 0);

        let mut config = NoiseConfig::new(TrainConfig {
            max_epochs: 1,
            ..TrainConfig::classifier_default(21)
        });
        config.ratios = vec![50.0];
        config.seeds = vec![2];
        let evals = [("dev".to_string(), &dev)];
        let table = noise_experiment(&train, &dev, &selections, &evals, &config).unwrap();
        assert_eq!(table.rows.len(), 2);
    }
}
