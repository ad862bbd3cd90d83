//! Stage orchestration: one config in, a counterfactually augmented training
//! set out. Every stage writes its artifacts into a run directory and logs
//! wall time, counts, and metrics into a manifest, so a run can be inspected,
//! resumed stage by stage, and reconciled against the candidate arithmetic.

pub mod baselines;
pub mod config;
pub mod experiments;

pub use config::{
    BaselineChoice, DecodeSettings, PipelineConfig, RetrainLoss, SelectionMode, TaskConfig,
    TokenizerChoice, TrainSettings,
};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    load_dataset, load_rationale_annotations, save_dataset, save_rationale_annotations,
    tokenize_dataset, Dataset, Example, LabelSet, RationaleAnnotations, SyntheticTask, TaskSchema,
    TokenizedDataset, Tokenizer, MASK_TOKEN,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::filterkit::{
    accepted_candidates, best_probability_select, consistency_filter, FilterReport,
    FilteredCandidate,
};
use crate::infill::{build_template, generate_candidates, CounterfactualCandidate, MaskedTemplate};
use crate::metrics::evaluate_classifier;
use crate::modelkit::{
    train_classifier, train_generator, ClassifierBackend, ClassifierDims, GenVocab, GeneratorDims,
    ReferenceClassifier, ReferenceGenerator, SelectionMetric, TrainItem, TrainTarget,
    TrainingReport, Vocab,
};
use crate::rationale::{extract_rationales, save_selections, RationaleSelection};

// ---------------------------------------------------------------------------
// JSONL helpers
// ---------------------------------------------------------------------------

/// Write one JSON record per line.
pub fn save_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a JSONL file written by [`save_jsonl`]. Blank lines are skipped;
/// malformed lines fail with their line number.
pub fn load_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// Task data
// ---------------------------------------------------------------------------

/// The corpus a run works on, wherever it came from.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub schema: TaskSchema,
    pub train: Dataset,
    pub dev: Dataset,
    pub test_id: Dataset,
    pub test_ood: Option<Dataset>,
    pub golden: Option<RationaleAnnotations>,
    /// Present when the corpus was generated, so oracle judges can be built.
    pub synthetic: Option<SyntheticTask>,
    suggested_pi: Option<f64>,
}

impl TaskData {
    pub fn from_config(task: &TaskConfig) -> Result<TaskData> {
        match task {
            TaskConfig::Synthetic { task } => {
                let corpus = task.generate()?;
                Ok(TaskData {
                    schema: corpus.schema.clone(),
                    suggested_pi: Some(corpus.suggested_pi()),
                    train: corpus.train,
                    dev: corpus.dev,
                    test_id: corpus.test_id,
                    test_ood: Some(corpus.test_ood),
                    golden: Some(corpus.golden),
                    synthetic: Some(task.clone()),
                })
            }
            TaskConfig::Files {
                labels,
                pair_mode,
                train,
                dev,
                test_id,
                test_ood,
                golden,
            } => {
                let schema = TaskSchema::new(LabelSet::new(labels.clone())?, *pair_mode);
                Ok(TaskData {
                    train: load_dataset(train, &schema)?,
                    dev: load_dataset(dev, &schema)?,
                    test_id: load_dataset(test_id, &schema)?,
                    test_ood: test_ood
                        .as_ref()
                        .map(|p| load_dataset(p, &schema))
                        .transpose()?,
                    golden: golden
                        .as_ref()
                        .map(load_rationale_annotations)
                        .transpose()?,
                    synthetic: None,
                    suggested_pi: None,
                    schema,
                })
            }
        }
    }

    pub fn label_count(&self) -> usize {
        self.schema.labels.len()
    }

    /// The planted trigger density of a generated corpus, as a percentage of
    /// words. Absent for file-based tasks.
    pub fn suggested_pi(&self) -> Option<f64> {
        self.suggested_pi
    }

    /// The rationale percentage a run should use: an explicit config value,
    /// else the planted trigger density of a generated corpus.
    pub fn resolve_pi(&self, config: &PipelineConfig) -> Result<f64> {
        config.pi.or(self.suggested_pi).ok_or_else(|| {
            Error::InvalidConfig("no pi configured and the task has no planted density".into())
        })
    }
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// One stage's footprint: wall time, size counts, scalar metrics, and the
/// files it wrote (paths relative to the run directory).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    #[serde(default)]
    pub counts: BTreeMap<String, u64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub artifacts: Vec<String>,
}

impl StageRecord {
    fn new(name: &str) -> Self {
        StageRecord {
            name: name.to_string(),
            ..StageRecord::default()
        }
    }

    pub fn count(&mut self, key: &str, value: usize) {
        self.counts.insert(key.to_string(), value as u64);
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    pub fn artifact(&mut self, relative_path: &str) {
        self.artifacts.push(relative_path.to_string());
    }
}

/// The whole-run record: the configuration as executed, the stage log, and
/// whether the candidate counts reconciled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<String>,
    pub reconciled: bool,
}

impl RunManifest {
    fn new(config: &PipelineConfig) -> Self {
        RunManifest {
            seed: config.seed,
            config: config.clone(),
            stages: Vec::new(),
            failed_stage: None,
            reconciled: false,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw = serde_json::to_string_pretty(self)?;
        fs::write(path, raw).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunManifest> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn need(&self, stage: &str, key: &str) -> Result<u64> {
        self.stage(stage)
            .and_then(|s| s.counts.get(key).copied())
            .ok_or_else(|| {
                Error::Inconsistency(format!(
                    "manifest lacks count '{key}' from stage '{stage}'"
                ))
            })
    }

    /// Check the candidate arithmetic: every kept template decodes into one
    /// candidate per flipped label per sample, acceptance can only shrink
    /// that, and the merged set is originals plus duplicated acceptances.
    pub fn reconcile(&mut self) -> Result<()> {
        let originals = self.need("corpus", "train")?;
        let labels = self.need("corpus", "labels")?;
        let kept = self.need("extract-rationales", "kept")?;
        let candidates = self.need("generate", "candidates")?;
        let accepted = self.need("filter", "accepted")?;
        let merged = self.need("merge", "merged")?;
        let samples = self.config.decode.num_samples as u64;
        let duplication = self.config.duplication_factor as u64;

        let expected = kept * (labels - 1) * samples;
        if candidates != expected {
            return Err(Error::Inconsistency(format!(
                "{kept} kept examples with {labels} labels and {samples} samples \
                 should yield {expected} candidates, the manifest records {candidates}"
            )));
        }
        if accepted > candidates {
            return Err(Error::Inconsistency(format!(
                "{accepted} acceptances out of {candidates} candidates"
            )));
        }
        if merged != originals + accepted * duplication {
            return Err(Error::Inconsistency(format!(
                "merged set holds {merged} examples, expected {originals} originals \
                 plus {accepted} acceptances times {duplication}"
            )));
        }
        self.reconciled = true;
        Ok(())
    }
}

fn run_stage<T>(
    manifest: &mut RunManifest,
    manifest_path: &Path,
    name: &'static str,
    body: impl FnOnce(&mut StageRecord) -> Result<T>,
) -> Result<T> {
    let mut record = StageRecord::new(name);
    let start = Instant::now();
    match body(&mut record) {
        Ok(value) => {
            record.seconds = start.elapsed().as_secs_f64();
            manifest.stages.push(record);
            manifest.save(manifest_path)?;
            Ok(value)
        }
        Err(err) => {
            manifest.failed_stage = Some(name.to_string());
            let _ = manifest.save(manifest_path);
            Err(Error::stage(name, err))
        }
    }
}

// ---------------------------------------------------------------------------
// Stage building blocks
// ---------------------------------------------------------------------------

/// Build masked templates for the kept selections of a tokenized dataset,
/// matched by example id. A missing selection is an error; skipped
/// selections contribute no template.
pub fn templates_from_selections(
    data: &TokenizedDataset,
    selections: &[RationaleSelection],
) -> Result<Vec<MaskedTemplate>> {
    let by_id: BTreeMap<&str, &RationaleSelection> =
        selections.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut templates = Vec::new();
    for item in data.iter() {
        let Some(selection) = by_id.get(item.id.as_str()) else {
            return Err(Error::Provenance(format!(
                "no rationale selection for example '{}'",
                item.id
            )));
        };
        if selection.skipped {
            continue;
        }
        templates.push(build_template(
            &item.text,
            &selection.word_indices,
            item.label.id(),
            &item.id,
        )?);
    }
    Ok(templates)
}

/// Generation vocabulary covering some template sets: markers up to the
/// largest slot count, then the corrupted words and the original spans.
pub fn generator_vocab(template_sets: &[&[MaskedTemplate]]) -> GenVocab {
    let max_slots = template_sets
        .iter()
        .flat_map(|set| set.iter())
        .map(|t| t.slots.len())
        .max()
        .unwrap_or(0);
    let mut words: Vec<&str> = Vec::new();
    for set in template_sets {
        for template in set.iter() {
            words.extend(template.words.iter().map(String::as_str));
            words.extend(template.targets.iter().flatten().map(String::as_str));
        }
    }
    GenVocab::build(max_slots, words)
}

/// Classification vocabulary over tokenized sets, with the mask word always
/// present.
pub fn classifier_vocab(sets: &[&TokenizedDataset]) -> Vocab {
    let subtokens: Vec<&str> = sets
        .iter()
        .flat_map(|set| set.iter())
        .flat_map(|item| item.text.subtokens.iter().map(String::as_str))
        .collect();
    Vocab::build([MASK_TOKEN], subtokens)
}

/// The merged training set: every original example, then the accepted
/// counterfactuals sorted by (origin, target, sample), each appearing
/// `duplication` times under its own id.
pub fn merge_augmented(
    originals: &Dataset,
    accepted: &[CounterfactualCandidate],
    duplication: usize,
) -> Result<Dataset> {
    if duplication == 0 {
        return Err(Error::InvalidConfig(
            "duplication factor must be at least 1".into(),
        ));
    }
    let labels = originals.labels().clone();
    let mut sorted: Vec<&CounterfactualCandidate> = accepted.iter().collect();
    sorted.sort_by(|a, b| {
        (a.origin_id.as_str(), a.target_label, a.sample_index)
            .cmp(&(b.origin_id.as_str(), b.target_label, b.sample_index))
    });

    let mut examples: Vec<Example> = originals.iter().cloned().collect();
    for candidate in sorted {
        let origin = originals.by_id(&candidate.origin_id).ok_or_else(|| {
            Error::Provenance(format!(
                "accepted counterfactual '{}' has no origin in the training set",
                candidate.candidate_id()
            ))
        })?;
        if origin.label().id() != candidate.origin_label {
            return Err(Error::Provenance(format!(
                "candidate '{}' claims origin label {} but its origin is labeled {}",
                candidate.candidate_id(),
                candidate.origin_label,
                origin.label().id()
            )));
        }
        let label = labels.get(candidate.target_label).ok_or_else(|| {
            Error::InvalidInput(format!(
                "candidate '{}' targets unknown label {}",
                candidate.candidate_id(),
                candidate.target_label
            ))
        })?;
        for copy in 0..duplication {
            let id = if copy == 0 {
                candidate.candidate_id()
            } else {
                format!("{}x{copy}", candidate.candidate_id())
            };
            examples.push(Example::new(id, candidate.segments.clone(), label.clone())?);
        }
    }
    Dataset::from_examples(originals.schema().clone(), examples)
}

// ---------------------------------------------------------------------------
// The augmentation run
// ---------------------------------------------------------------------------

/// What `run_augment` leaves in memory for callers that keep going. All of
/// it is also on disk in the run directory.
#[derive(Debug)]
pub struct AugmentOutcome {
    pub data: TaskData,
    pub pi: f64,
    pub classifier: ReferenceClassifier,
    pub generator: ReferenceGenerator,
    pub selections: Vec<RationaleSelection>,
    pub records: Vec<FilteredCandidate>,
    pub filter_report: FilterReport,
    pub accepted: Vec<CounterfactualCandidate>,
    pub augmented_train: Dataset,
    pub manifest: RunManifest,
}

/// Run the full augmentation: corpus, classifier, rationales, templates,
/// generator, decoding, filtering, merge. Artifacts land in `run_dir`; the
/// manifest is rewritten after every stage so a failed run still shows how
/// far it got.
pub fn run_augment(config: &PipelineConfig, run_dir: impl AsRef<Path>) -> Result<AugmentOutcome> {
    config.validate()?;
    let run_dir = run_dir.as_ref();
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let manifest_path = run_dir.join("manifest.json");
    let mut manifest = RunManifest::new(config);
    let tokenizer = config.tokenizer.build()?;
    let tokenizer = tokenizer.as_ref();
    let seed = config.seed;

    let data = run_stage(&mut manifest, &manifest_path, "corpus", |record| {
        let data = TaskData::from_config(&config.task)?;
        save_dataset(&data.train, run_dir.join("train.jsonl"))?;
        save_dataset(&data.dev, run_dir.join("dev.jsonl"))?;
        save_dataset(&data.test_id, run_dir.join("test_id.jsonl"))?;
        record.artifact("train.jsonl");
        record.artifact("dev.jsonl");
        record.artifact("test_id.jsonl");
        if let Some(ood) = &data.test_ood {
            save_dataset(ood, run_dir.join("test_ood.jsonl"))?;
            record.artifact("test_ood.jsonl");
            record.count("test_ood", ood.len());
        }
        if let Some(golden) = &data.golden {
            save_rationale_annotations(golden, run_dir.join("golden.jsonl"))?;
            record.artifact("golden.jsonl");
        }
        record.count("train", data.train.len());
        record.count("dev", data.dev.len());
        record.count("test_id", data.test_id.len());
        record.count("labels", data.label_count());
        Ok(data)
    })?;

    let (train_tok, dev_tok, classifier) =
        run_stage(&mut manifest, &manifest_path, "train-classifier", |record| {
            let train_tok = tokenize_dataset(&data.train, tokenizer)?;
            let dev_tok = tokenize_dataset(&data.dev, tokenizer)?;
            let vocab = classifier_vocab(&[&train_tok]);
            record.count("vocab", vocab.len());
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
            let report = train_classifier(&train_tok, &dev_tok, &train_config, &mut classifier)?;
            if let Some(metric) = report.best_metric {
                record.metric("dev_accuracy", metric);
            }
            record.count("epochs", report.epochs_run);
            classifier.save(run_dir.join("classifier.json"))?;
            record.artifact("classifier.json");
            Ok((train_tok, dev_tok, classifier))
        })?;

    let (selections, dev_selections, pi) =
        run_stage(&mut manifest, &manifest_path, "extract-rationales", |record| {
            let pi = data.resolve_pi(config)?;
            let (selections, report) = extract_rationales(&classifier, &train_tok, pi)?;
            let (dev_selections, dev_report) = extract_rationales(&classifier, &dev_tok, pi)?;
            save_selections(&selections, run_dir.join("selections.jsonl"))?;
            save_selections(&dev_selections, run_dir.join("selections_dev.jsonl"))?;
            record.artifact("selections.jsonl");
            record.artifact("selections_dev.jsonl");
            record.metric("pi", pi);
            record.count("kept", report.kept);
            record.count("skipped_mispredicted", report.skipped_mispredicted);
            record.count("skipped_degenerate", report.skipped_degenerate);
            record.count("dev_kept", dev_report.kept);
            Ok((selections, dev_selections, pi))
        })?;

    let (templates, dev_templates) =
        run_stage(&mut manifest, &manifest_path, "build-templates", |record| {
            let templates = templates_from_selections(&train_tok, &selections)?;
            let dev_templates = templates_from_selections(&dev_tok, &dev_selections)?;
            if templates.is_empty() {
                return Err(Error::InsufficientData(
                    "no usable training templates; the classifier got nothing right".into(),
                ));
            }
            if dev_templates.is_empty() {
                return Err(Error::InsufficientData(
                    "no usable dev templates for generator model selection".into(),
                ));
            }
            save_jsonl(&templates, run_dir.join("templates.jsonl"))?;
            save_jsonl(&dev_templates, run_dir.join("templates_dev.jsonl"))?;
            record.artifact("templates.jsonl");
            record.artifact("templates_dev.jsonl");
            record.count("train_templates", templates.len());
            record.count("dev_templates", dev_templates.len());
            Ok((templates, dev_templates))
        })?;

    let generator = run_stage(&mut manifest, &manifest_path, "train-generator", |record| {
        let vocab = generator_vocab(&[&templates, &dev_templates]);
        record.count("vocab", vocab.len());
        let mut generator = ReferenceGenerator::new(
            vocab,
            data.label_count(),
            GeneratorDims::default(),
            derive_seed(seed, &["generator-model"]),
        )?;
        let train_config = config.generator_train.to_train_config(
            derive_seed(seed, &["generator-train"]),
            SelectionMetric::DevPerplexity,
        );
        let objective = config.objective();
        record.metric("alpha", objective.alpha);
        let report =
            train_generator(&templates, &dev_templates, &objective, &train_config, &mut generator)?;
        if let Some(metric) = report.best_metric {
            record.metric("dev_perplexity", metric);
        }
        record.count("epochs", report.epochs_run);
        generator.save(run_dir.join("generator.json"))?;
        record.artifact("generator.json");
        Ok(generator)
    })?;

    let candidates = run_stage(&mut manifest, &manifest_path, "generate", |record| {
        let decode = config.decode.to_decode_config(seed);
        let candidates = generate_candidates(&generator, &templates, &decode)?;
        let expected = templates.len() * (data.label_count() - 1) * decode.num_samples;
        if candidates.len() != expected {
            return Err(Error::Inconsistency(format!(
                "expected {expected} candidates, decoded {}",
                candidates.len()
            )));
        }
        save_jsonl(&candidates, run_dir.join("candidates.jsonl"))?;
        record.artifact("candidates.jsonl");
        record.count("candidates", candidates.len());
        record.count(
            "degenerate",
            candidates.iter().filter(|c| c.degenerate).count(),
        );
        record.count(
            "truncated",
            candidates.iter().filter(|c| c.truncated).count(),
        );
        Ok(candidates)
    })?;

    let (records, filter_report, accepted) =
        run_stage(&mut manifest, &manifest_path, "filter", |record| {
            let (records, report) = match config.selection_mode {
                SelectionMode::ConsistencyFilter => {
                    consistency_filter(&candidates, &classifier, tokenizer, &config.filter)?
                }
                SelectionMode::BestProbability => {
                    best_probability_select(&candidates, &classifier, tokenizer, &config.filter)?
                }
            };
            let accepted = accepted_candidates(&records);
            save_jsonl(&records, run_dir.join("filtered.jsonl"))?;
            save_jsonl(&accepted, run_dir.join("accepted.jsonl"))?;
            let report_path = run_dir.join("filter_report.json");
            let raw = serde_json::to_string_pretty(&report)?;
            fs::write(&report_path, raw).map_err(|e| Error::io(&report_path, e))?;
            record.artifact("filtered.jsonl");
            record.artifact("accepted.jsonl");
            record.artifact("filter_report.json");
            record.count("accepted", accepted.len());
            record.metric("acceptance_rate", report.acceptance_rate);
            Ok((records, report, accepted))
        })?;

    let augmented_train = run_stage(&mut manifest, &manifest_path, "merge", |record| {
        let augmented = merge_augmented(&data.train, &accepted, config.duplication_factor)?;
        save_dataset(&augmented, run_dir.join("augmented_train.jsonl"))?;
        record.artifact("augmented_train.jsonl");
        record.count("merged", augmented.len());
        record.count("added", augmented.len() - data.train.len());
        Ok(augmented)
    })?;

    manifest.reconcile()?;
    manifest.save(&manifest_path)?;

    Ok(AugmentOutcome {
        data,
        pi,
        classifier,
        generator,
        selections,
        records,
        filter_report,
        accepted,
        augmented_train,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// Retraining
// ---------------------------------------------------------------------------

/// A retrained classifier with its training log and named eval accuracies.
#[derive(Debug)]
pub struct RetrainOutcome {
    pub classifier: ReferenceClassifier,
    pub report: TrainingReport,
    pub eval: BTreeMap<String, f64>,
}

/// Retrain a fresh classifier on the originals plus accepted counterfactuals
/// and score it on dev, test_id, and (when present) test_ood. In `ce` mode a
/// counterfactual is an ordinary example of its target label; in `cf` mode it
/// pays -log(1 - P(origin label)) instead, pushing probability mass off the
/// label it was flipped away from.
pub fn retrain_with_cad(
    data: &TaskData,
    accepted: &[CounterfactualCandidate],
    loss: RetrainLoss,
    tokenizer: &dyn Tokenizer,
    settings: &TrainSettings,
    dims: ClassifierDims,
    seed: u64,
) -> Result<RetrainOutcome> {
    let train_tok = tokenize_dataset(&data.train, tokenizer)?;
    let dev_tok = tokenize_dataset(&data.dev, tokenizer)?;
    let test_id_tok = tokenize_dataset(&data.test_id, tokenizer)?;
    let test_ood_tok = data
        .test_ood
        .as_ref()
        .map(|set| tokenize_dataset(set, tokenizer))
        .transpose()?;

    let mut cad_items = Vec::with_capacity(accepted.len());
    for candidate in accepted {
        if candidate.target_label >= data.label_count() {
            return Err(Error::InvalidInput(format!(
                "candidate '{}' targets unknown label {}",
                candidate.candidate_id(),
                candidate.target_label
            )));
        }
        let origin = data.train.by_id(&candidate.origin_id).ok_or_else(|| {
            Error::Provenance(format!(
                "counterfactual '{}' has no origin in the training set",
                candidate.candidate_id()
            ))
        })?;
        if origin.label().id() != candidate.origin_label {
            return Err(Error::Provenance(format!(
                "candidate '{}' claims origin label {} but its origin is labeled {}",
                candidate.candidate_id(),
                candidate.origin_label,
                origin.label().id()
            )));
        }
        let text = tokenizer.tokenize_align(&candidate.segments).map_err(|e| {
            Error::Inconsistency(format!(
                "accepted counterfactual '{}' no longer tokenizes: {e}",
                candidate.candidate_id()
            ))
        })?;
        let target = match loss {
            RetrainLoss::Ce => TrainTarget::Is(candidate.target_label),
            RetrainLoss::Cf => TrainTarget::IsNot(candidate.origin_label),
        };
        cad_items.push(TrainItem { text, target });
    }

    let subtokens: Vec<&str> = train_tok
        .iter()
        .flat_map(|item| item.text.subtokens.iter().map(String::as_str))
        .chain(
            cad_items
                .iter()
                .flat_map(|item| item.text.subtokens.iter().map(String::as_str)),
        )
        .collect();
    let vocab = Vocab::build([MASK_TOKEN], subtokens);

    let mut items: Vec<TrainItem> = train_tok
        .iter()
        .map(|item| TrainItem {
            text: item.text.clone(),
            target: TrainTarget::Is(item.label.id()),
        })
        .collect();
    items.extend(cad_items);

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
    let report = classifier.fit(&items, &dev_tok, &train_config)?;

    let mut sets: Vec<(String, &TokenizedDataset)> = vec![
        ("dev".to_string(), &dev_tok),
        ("test_id".to_string(), &test_id_tok),
    ];
    if let Some(ood) = &test_ood_tok {
        sets.push(("test_ood".to_string(), ood));
    }
    let eval = evaluate_classifier(&classifier, &sets)?;

    Ok(RetrainOutcome {
        classifier,
        report,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitCounts;
    use crate::infill::SpanFill;

    fn quick_config(seed: u64) -> PipelineConfig {
        let mut task = SyntheticTask::binary(seed);
        task.counts = SplitCounts {
            train: 40,
            dev: 20,
            test_id: 10,
            test_ood: 10,
        };
        let mut config = PipelineConfig::synthetic(task, seed);
        config.classifier_train.max_epochs = 4;
        config.classifier_train.patience = 0;
        config.generator_train.max_epochs = 3;
        config.generator_train.patience = 0;
        config
    }

    #[test]
    fn augment_writes_every_artifact_and_reconciles() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config(11);
        let outcome = run_augment(&config, dir.path()).unwrap();

        let manifest = &outcome.manifest;
        assert!(manifest.reconciled);
        assert_eq!(manifest.failed_stage, None);
        let names: Vec<&str> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "corpus",
                "train-classifier",
                "extract-rationales",
                "build-templates",
                "train-generator",
                "generate",
                "filter",
                "merge"
            ]
        );
        for stage in &manifest.stages {
            for artifact in &stage.artifacts {
                assert!(dir.path().join(artifact).is_file(), "missing {artifact}");
            }
        }

        let kept = manifest.stage("extract-rationales").unwrap().counts["kept"];
        let candidates = manifest.stage("generate").unwrap().counts["candidates"];
        assert_eq!(candidates, kept);
        assert!(outcome.accepted.len() as u64 <= candidates);
        assert_eq!(
            outcome.augmented_train.len(),
            outcome.data.train.len() + outcome.accepted.len()
        );

        let reloaded = RunManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(reloaded.stages.len(), 8);
        assert!(reloaded.reconciled);
    }

    #[test]
    fn reruns_write_byte_identical_artifacts() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = quick_config(5);
        run_augment(&config, dir_a.path()).unwrap();
        run_augment(&config, dir_b.path()).unwrap();
        for name in [
            "train.jsonl",
            "selections.jsonl",
            "templates.jsonl",
            "candidates.jsonl",
            "filtered.jsonl",
            "accepted.jsonl",
            "augmented_train.jsonl",
        ] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn failed_stages_are_named_and_leave_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            pi: Some(30.0),
            ..PipelineConfig::synthetic(SyntheticTask::binary(1), 1)
        };
        let config = PipelineConfig {
            task: TaskConfig::Files {
                labels: vec!["neg".into(), "pos".into()],
                pair_mode: false,
                train: dir.path().join("nope.jsonl"),
                dev: dir.path().join("nope.jsonl"),
                test_id: dir.path().join("nope.jsonl"),
                test_ood: None,
                golden: None,
            },
            ..config
        };
        let err = run_augment(&config, dir.path()).unwrap_err();
        match err {
            Error::Stage { stage, .. } => assert_eq!(stage, "corpus"),
            other => panic!("expected a stage error, got {other}"),
        }
        let manifest = RunManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.failed_stage.as_deref(), Some("corpus"));
        assert!(manifest.stages.is_empty());
    }

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

    /// Candidates that flip each origin by swapping its trigger words for
    /// triggers of the opposite label.
    fn flip_candidates(data: &TaskData, count: usize) -> Vec<CounterfactualCandidate> {
        let task = data.synthetic.as_ref().unwrap();
        let trigger_label: BTreeMap<&str, usize> = task
            .triggers
            .iter()
            .flat_map(|(name, words)| {
                let id = data.schema.labels.by_name(name).unwrap().id();
                words.iter().map(move |w| (w.as_str(), id))
            })
            .collect();
        let mut out = Vec::new();
        for example in data.train.iter().take(count) {
            let origin_label = example.label().id();
            let target = 1 - origin_label;
            let target_name = data.schema.labels.get(target).unwrap().name();
            let replacement = task.triggers[target_name][0].clone();
            let mut spans = Vec::new();
            let words: Vec<String> = example.segments()[0]
                .split_whitespace()
                .map(|w| {
                    if trigger_label.get(w) == Some(&origin_label) {
                        spans.push(SpanFill {
                            words: vec![replacement.clone()],
                            truncated: false,
                        });
                        replacement.clone()
                    } else {
                        w.to_string()
                    }
                })
                .collect();
            assert!(!spans.is_empty());
            out.push(CounterfactualCandidate {
                origin_id: example.id().to_string(),
                origin_label,
                target_label: target,
                sample_index: 0,
                segments: vec![words.join(" ")],
                filled_spans: spans,
                degenerate: false,
                truncated: false,
            });
        }
        out
    }

    #[test]
    fn merge_orders_duplicates_and_validates_origins() {
        let data = tiny_data(17);
        let accepted = flip_candidates(&data, 3);
        let merged = merge_augmented(&data.train, &accepted, 2).unwrap();
        assert_eq!(merged.len(), data.train.len() + 6);

        let first = &accepted[0];
        let base_id = first.candidate_id();
        let copy_id = format!("{base_id}x1");
        let base = merged.by_id(&base_id).unwrap();
        let copy = merged.by_id(&copy_id).unwrap();
        assert_eq!(base.segments(), copy.segments());
        assert_eq!(base.label().id(), first.target_label);

        let mut orphaned = accepted.clone();
        orphaned[0].origin_id = "missing".into();
        assert!(matches!(
            merge_augmented(&data.train, &orphaned, 1),
            Err(Error::Provenance(_))
        ));

        let mut mislabeled = accepted;
        mislabeled[0].origin_label = 1 - mislabeled[0].origin_label;
        mislabeled[0].target_label = 1 - mislabeled[0].target_label;
        assert!(matches!(
            merge_augmented(&data.train, &mislabeled, 1),
            Err(Error::Provenance(_))
        ));
    }

    #[test]
    fn retrain_runs_both_modes_and_checks_provenance() {
        let data = tiny_data(29);
        let accepted = flip_candidates(&data, 6);
        let settings = TrainSettings {
            max_epochs: 3,
            patience: 0,
            ..TrainSettings::classifier_default()
        };
        let tokenizer = crate::corpus::WhitespaceTokenizer;

        for loss in [RetrainLoss::Ce, RetrainLoss::Cf] {
            let outcome = retrain_with_cad(
                &data,
                &accepted,
                loss,
                &tokenizer,
                &settings,
                ClassifierDims::default(),
                3,
            )
            .unwrap();
            assert!(outcome.eval.contains_key("dev"));
            assert!(outcome.eval.contains_key("test_id"));
            assert!(outcome.eval.contains_key("test_ood"));
            assert!(outcome.report.epochs_run > 0);

            let again = retrain_with_cad(
                &data,
                &accepted,
                loss,
                &tokenizer,
                &settings,
                ClassifierDims::default(),
                3,
            )
            .unwrap();
            assert_eq!(outcome.eval, again.eval);
        }

        let mut bad = flip_candidates(&data, 1);
        bad[0].origin_label = 1 - bad[0].origin_label;
        bad[0].target_label = 1 - bad[0].target_label;
        assert!(matches!(
            retrain_with_cad(
                &data,
                &bad,
                RetrainLoss::Cf,
                &tokenizer,
                &settings,
                ClassifierDims::default(),
                3,
            ),
            Err(Error::Provenance(_))
        ));
    }

    #[test]
    fn jsonl_failures_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let data = tiny_data(3);
        let items = flip_candidates(&data, 2);
        save_jsonl(&items, &path).unwrap();
        let back: Vec<CounterfactualCandidate> = load_jsonl(&path).unwrap();
        assert_eq!(back, items);

        let mut raw = fs::read_to_string(&path).unwrap();
        raw.push_str("not json\n");
        fs::write(&path, raw).unwrap();
        match load_jsonl::<CounterfactualCandidate>(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }
}
