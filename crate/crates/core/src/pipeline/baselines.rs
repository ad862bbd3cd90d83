//! Comparison baselines: random word masks in place of saliency rationales,
//! and label-preserving synonym replacement in place of counterfactual
//! generation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    tokenize_dataset, Dataset, Example, SyntheticTask, TokenizedDataset, Tokenizer,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::filterkit::{
    accepted_candidates, best_probability_select, consistency_filter, FilterReport,
    FilteredCandidate,
};
use crate::infill::{generate_candidates, CounterfactualCandidate};
use crate::metrics::evaluate_classifier;
use crate::modelkit::{
    train_classifier, ClassifierDims, GeneratorDims, ReferenceClassifier, ReferenceGenerator,
    SelectionMetric,
};
use crate::pipeline::{
    classifier_vocab, generator_vocab, merge_augmented, retrain_with_cad,
    templates_from_selections, PipelineConfig, RetrainOutcome, SelectionMode, TaskData,
    TrainSettings,
};
use crate::rationale::{rationale_budget, validate_pi, RationaleSelection};

/// Uniformly random word subsets of the size a saliency selection would
/// produce, as a control for rationale quality. Every example gets a
/// selection; nothing is skipped.
pub fn random_selections(
    data: &TokenizedDataset,
    pi: f64,
    seed: u64,
) -> Result<Vec<RationaleSelection>> {
    validate_pi(pi)?;
    let mut selections = Vec::with_capacity(data.len());
    for item in data.iter() {
        let m = item.text.m();
        let budget = rationale_budget(pi, m);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["random-mask", &item.id]));
        let mut indices = rand::seq::index::sample(&mut rng, m, budget).into_vec();
        indices.sort_unstable();
        selections.push(RationaleSelection {
            id: item.id.clone(),
            word_indices: indices,
            pi,
            skipped: false,
        });
    }
    Ok(selections)
}

/// Synonyms for the trigger inventory of a synthetic task: each trigger maps
/// to the other triggers of its own label, so replacement never moves an
/// example across the oracle's decision boundary.
pub fn synthetic_synonym_lexicon(task: &SyntheticTask) -> BTreeMap<String, Vec<String>> {
    let mut lexicon = BTreeMap::new();
    for words in task.triggers.values() {
        for word in words {
            let others: Vec<String> = words.iter().filter(|w| *w != word).cloned().collect();
            if !others.is_empty() {
                lexicon.insert(word.clone(), others);
            }
        }
    }
    lexicon
}

/// Copy a dataset with about `percent` percent of each example's words
/// swapped for synonyms. Labels stay put and ids get a suffix, so the copies
/// can join their originals in one training set. Words outside the lexicon
/// and words in `stopwords` are never touched; when the lexicon runs dry the
/// copy simply carries fewer replacements.
pub fn synonym_replace(
    data: &Dataset,
    lexicon: &BTreeMap<String, Vec<String>>,
    percent: f64,
    stopwords: &BTreeSet<String>,
    seed: u64,
) -> Result<Dataset> {
    if !percent.is_finite() || !(0.0..=100.0).contains(&percent) {
        return Err(Error::InvalidConfig(format!(
            "replacement percentage must lie in [0, 100], got {percent}"
        )));
    }
    let mut examples = Vec::with_capacity(data.len());
    for example in data.iter() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["synonym", example.id()]));
        let mut segments: Vec<Vec<String>> = example
            .segments()
            .iter()
            .map(|s| s.split_whitespace().map(String::from).collect())
            .collect();
        let mut positions: Vec<(usize, usize)> = segments
            .iter()
            .enumerate()
            .flat_map(|(si, words)| (0..words.len()).map(move |wi| (si, wi)))
            .collect();
        let goal = (percent * positions.len() as f64 / 100.0).ceil() as usize;
        positions.shuffle(&mut rng);

        let mut replaced = 0;
        for (si, wi) in positions {
            if replaced >= goal {
                break;
            }
            let word = &segments[si][wi];
            if stopwords.contains(word) {
                continue;
            }
            let Some(options) = lexicon.get(word) else {
                continue;
            };
            let alternatives: Vec<&String> = options.iter().filter(|o| *o != word).collect();
            if alternatives.is_empty() {
                continue;
            }
            let pick = alternatives[rng.gen_range(0..alternatives.len())].clone();
            segments[si][wi] = pick;
            replaced += 1;
        }

        let rebuilt: Vec<String> = segments.iter().map(|words| words.join(" ")).collect();
        examples.push(Example::new(
            format!("{}#syn", example.id()),
            rebuilt,
            example.label().clone(),
        )?);
    }
    Dataset::from_examples(data.schema().clone(), examples)
}

/// Train a classifier on the originals plus their synonym-replaced copies
/// and score it like a retraining run. Returns the copies alongside the
/// outcome so callers can persist what the classifier actually saw.
pub fn synonym_baseline(
    data: &TaskData,
    lexicon: &BTreeMap<String, Vec<String>>,
    percent: f64,
    stopwords: &BTreeSet<String>,
    tokenizer: &dyn Tokenizer,
    settings: &TrainSettings,
    dims: ClassifierDims,
    seed: u64,
) -> Result<(Dataset, RetrainOutcome)> {
    let copies = synonym_replace(
        &data.train,
        lexicon,
        percent,
        stopwords,
        derive_seed(seed, &["synonym-copies"]),
    )?;
    let mut merged: Vec<Example> = data.train.iter().cloned().collect();
    merged.extend(copies.iter().cloned());
    let merged = Dataset::from_examples(data.schema.clone(), merged)?;

    let train_tok = tokenize_dataset(&merged, tokenizer)?;
    let dev_tok = tokenize_dataset(&data.dev, tokenizer)?;
    let test_id_tok = tokenize_dataset(&data.test_id, tokenizer)?;
    let test_ood_tok = data
        .test_ood
        .as_ref()
        .map(|set| tokenize_dataset(set, tokenizer))
        .transpose()?;

    let vocab = classifier_vocab(&[&train_tok]);
    let mut classifier = ReferenceClassifier::new(
        vocab,
        data.label_count(),
        data.schema.segment_count(),
        dims,
        derive_seed(seed, &["retrain-model"]),
    )?;
    let train_config = settings.to_train_config(
        derive_seed(seed, &["retrain"]),
        SelectionMetric::DevAccuracy,
    );
    let report = train_classifier(&train_tok, &dev_tok, &train_config, &mut classifier)?;

    let mut sets: Vec<(String, &TokenizedDataset)> = vec![
        ("dev".to_string(), &dev_tok),
        ("test_id".to_string(), &test_id_tok),
    ];
    if let Some(ood) = &test_ood_tok {
        sets.push(("test_ood".to_string(), ood));
    }
    let eval = evaluate_classifier(&classifier, &sets)?;

    Ok((
        copies,
        RetrainOutcome {
            classifier,
            report,
            eval,
        },
    ))
}

/// Everything the control run produces, shaped like the main pipeline's
/// outputs so the two can be compared artifact for artifact.
#[derive(Debug)]
pub struct ControlOutcome {
    pub data: TaskData,
    pub pi: f64,
    pub candidates: Vec<CounterfactualCandidate>,
    pub records: Vec<FilteredCandidate>,
    pub filter_report: FilterReport,
    pub accepted: Vec<CounterfactualCandidate>,
    pub augmented_train: Dataset,
    pub retrain: RetrainOutcome,
}

/// The counterfactual pipeline with both learned pieces knocked out: masks
/// fall on uniformly random words instead of saliency rationales, and the
/// generator fills slots straight from initialization. Classifier training,
/// filtering, merging, and retraining all match `run_augment`, so the score
/// gap against a real run isolates what the learned stages contribute.
pub fn random_mask_notrain_baseline(config: &PipelineConfig) -> Result<ControlOutcome> {
    config.validate()?;
    let seed = config.seed;
    let tokenizer = config.tokenizer.build()?;
    let tokenizer = tokenizer.as_ref();
    let data = TaskData::from_config(&config.task)?;
    let train_tok = tokenize_dataset(&data.train, tokenizer)?;
    let dev_tok = tokenize_dataset(&data.dev, tokenizer)?;

    let vocab = classifier_vocab(&[&train_tok]);
    let mut classifier = ReferenceClassifier::new(
        vocab,
        data.label_count(),
        data.schema.segment_count(),
        ClassifierDims::default(),
        derive_seed(seed, &["classifier-model"]),
    )?;
    let train_config = config.classifier_train.to_train_config(
        derive_seed(seed, &["classifier-train"]),
        SelectionMetric::DevAccuracy,
    );
    train_classifier(&train_tok, &dev_tok, &train_config, &mut classifier)?;

    let pi = data.resolve_pi(config)?;
    let selections =
        random_selections(&train_tok, pi, derive_seed(seed, &["baseline-random-mask"]))?;
    let templates = templates_from_selections(&train_tok, &selections)?;
    if templates.is_empty() {
        return Err(Error::InsufficientData(
            "no usable templates for the control run".into(),
        ));
    }

    let generator = ReferenceGenerator::new(
        generator_vocab(&[&templates]),
        data.label_count(),
        GeneratorDims::default(),
        derive_seed(seed, &["generator-model"]),
    )?;
    let decode = config.decode.to_decode_config(seed);
    let candidates = generate_candidates(&generator, &templates, &decode)?;

    let (records, filter_report) = match config.selection_mode {
        SelectionMode::ConsistencyFilter => {
            consistency_filter(&candidates, &classifier, tokenizer, &config.filter)?
        }
        SelectionMode::BestProbability => {
            best_probability_select(&candidates, &classifier, tokenizer, &config.filter)?
        }
    };
    let accepted = accepted_candidates(&records);
    let augmented_train = merge_augmented(&data.train, &accepted, config.duplication_factor)?;
    let retrain = retrain_with_cad(
        &data,
        &accepted,
        config.retrain_loss,
        tokenizer,
        &config.classifier_train,
        ClassifierDims::default(),
        seed,
    )?;

    Ok(ControlOutcome {
        data,
        pi,
        candidates,
        records,
        filter_report,
        accepted,
        augmented_train,
        retrain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SplitCounts, TriggerOracle, WhitespaceTokenizer};
    use crate::pipeline::TaskConfig;

    fn tiny_data(seed: u64) -> TaskData {
        let mut task = SyntheticTask::binary(seed);
        task.counts = SplitCounts {
            train: 30,
            dev: 16,
            test_id: 10,
            test_ood: 10,
        };
        TaskData::from_config(&TaskConfig::Synthetic { task }).unwrap()
    }

    #[test]
    fn random_selections_hit_the_budget_and_rerun_identically() {
        let data = tiny_data(41);
        let tokenized = tokenize_dataset(&data.train, &WhitespaceTokenizer).unwrap();
        let first = random_selections(&tokenized, 25.0, 9).unwrap();
        let again = random_selections(&tokenized, 25.0, 9).unwrap();
        assert_eq!(first, again);
        assert_eq!(first.len(), tokenized.len());
        for (selection, item) in first.iter().zip(tokenized.iter()) {
            assert_eq!(selection.id, item.id);
            assert!(!selection.skipped);
            let m = item.text.m();
            assert_eq!(selection.word_indices.len(), rationale_budget(25.0, m));
            assert!(selection.word_indices.windows(2).all(|w| w[0] < w[1]));
            assert!(selection.word_indices.iter().all(|&i| i < m));
        }

        let other_seed = random_selections(&tokenized, 25.0, 10).unwrap();
        assert_ne!(first, other_seed);
        assert!(random_selections(&tokenized, 0.0, 9).is_err());
    }

    #[test]
    fn synonym_lexicon_stays_inside_each_label() {
        let task = SyntheticTask::binary(1);
        let lexicon = synthetic_synonym_lexicon(&task);
        for (label, words) in &task.triggers {
            for word in words {
                let options = &lexicon[word];
                assert_eq!(options.len(), words.len() - 1);
                assert!(!options.contains(word));
                assert!(options.iter().all(|o| task.triggers[label].contains(o)));
            }
        }
    }

    #[test]
    fn synonym_copies_keep_their_oracle_label() {
        let data = tiny_data(57);
        let task = data.synthetic.as_ref().unwrap();
        let lexicon = synthetic_synonym_lexicon(task);
        let oracle = TriggerOracle::new(task).unwrap();
        let copies =
            synonym_replace(&data.train, &lexicon, 30.0, &BTreeSet::new(), 5).unwrap();
        assert_eq!(copies.len(), data.train.len());

        let mut changed = 0;
        for (copy, original) in copies.iter().zip(data.train.iter()) {
            assert_eq!(copy.id(), format!("{}#syn", original.id()));
            assert_eq!(copy.label().id(), original.label().id());
            assert_eq!(
                oracle.judge_segments(copy.segments()),
                Some(original.label().id())
            );
            let copy_words: Vec<&str> = copy.segments()[0].split_whitespace().collect();
            let original_words: Vec<&str> =
                original.segments()[0].split_whitespace().collect();
            assert_eq!(copy_words.len(), original_words.len());
            for (cw, ow) in copy_words.iter().zip(&original_words) {
                if cw != ow {
                    changed += 1;
                    let label_name = original.label().name();
                    assert!(task.triggers[label_name].contains(&(*ow).to_string()));
                    assert!(task.triggers[label_name].contains(&(*cw).to_string()));
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn empty_lexicons_produce_untouched_copies() {
        let data = tiny_data(3);
        let copies = synonym_replace(
            &data.train,
            &BTreeMap::new(),
            50.0,
            &BTreeSet::new(),
            5,
        )
        .unwrap();
        for (copy, original) in copies.iter().zip(data.train.iter()) {
            assert_eq!(copy.segments(), original.segments());
        }
        assert!(synonym_replace(
            &data.train,
            &BTreeMap::new(),
            150.0,
            &BTreeSet::new(),
            5
        )
        .is_err());
    }

    #[test]
    fn stopwords_are_never_replaced() {
        let data = tiny_data(19);
        let task = data.synthetic.as_ref().unwrap();
        let lexicon = synthetic_synonym_lexicon(task);
        let stopwords: BTreeSet<String> = lexicon.keys().cloned().collect();
        let copies = synonym_replace(&data.train, &lexicon, 50.0, &stopwords, 5).unwrap();
        for (copy, original) in copies.iter().zip(data.train.iter()) {
            assert_eq!(copy.segments(), original.segments());
        }
    }

    #[test]
    fn synonym_baseline_scores_every_split() {
        let data = tiny_data(23);
        let task = data.synthetic.as_ref().unwrap();
        let lexicon = synthetic_synonym_lexicon(task);
        let settings = TrainSettings {
            max_epochs: 3,
            patience: 0,
            ..TrainSettings::classifier_default()
        };
        let (copies, outcome) = synonym_baseline(
            &data,
            &lexicon,
            30.0,
            &BTreeSet::new(),
            &WhitespaceTokenizer,
            &settings,
            ClassifierDims::default(),
            7,
        )
        .unwrap();
        assert_eq!(copies.len(), data.train.len());
        assert!(outcome.eval.contains_key("dev"));
        assert!(outcome.eval.contains_key("test_id"));
        assert!(outcome.eval.contains_key("test_ood"));
        assert!(outcome.report.epochs_run > 0);
    }

    #[test]
    fn the_control_pipeline_runs_end_to_end_and_reruns_identically() {
        let mut task = SyntheticTask::binary(11);
        task.counts = SplitCounts {
            train: 24,
            dev: 12,
            test_id: 8,
            test_ood: 8,
        };
        let mut config = PipelineConfig::synthetic(task, 5);
        config.classifier_train.max_epochs = 3;
        config.classifier_train.patience = 0;

        let outcome = random_mask_notrain_baseline(&config).unwrap();
        assert_eq!(outcome.candidates.len(), outcome.data.train.len());
        assert_eq!(outcome.records.len(), outcome.candidates.len());
        assert!(outcome.accepted.len() <= outcome.candidates.len());
        assert_eq!(
            outcome.augmented_train.len(),
            outcome.data.train.len() + outcome.accepted.len()
        );
        assert!(outcome.retrain.eval.contains_key("dev"));
        assert!(outcome.retrain.eval.contains_key("test_id"));
        assert!(outcome.retrain.eval.contains_key("test_ood"));

        let again = random_mask_notrain_baseline(&config).unwrap();
        assert_eq!(outcome.candidates, again.candidates);
        assert_eq!(outcome.retrain.eval, again.retrain.eval);
    }
}
