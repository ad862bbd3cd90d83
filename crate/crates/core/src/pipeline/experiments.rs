//! Controlled generator comparisons on a synthetic task: an ablation grid
//! over mask source and training objective, and a sweep over the
//! unlikelihood weight. Scores are oracle-judged flipping rates and span
//! diversity over raw candidates, before any consistency filtering, so they
//! measure the generator alone.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    tokenize_dataset, SyntheticTask, TriggerOracle, WhitespaceTokenizer,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::infill::{generate_candidates, DecodeConfig, MaskedTemplate};
use crate::metrics::{candidate_span_text, distinct_n, flipping_rate, Judge};
use crate::modelkit::{
    train_classifier, train_generator, ClassifierDims, GeneratorDims, InfillObjective,
    ReferenceClassifier, ReferenceGenerator, SelectionMetric,
};
use crate::pipeline::baselines::random_selections;
use crate::pipeline::{
    classifier_vocab, generator_vocab, templates_from_selections, DecodeSettings, TaskConfig,
    TaskData, TrainSettings,
};
use crate::rationale::extract_rationales;

/// Where the masks that become slot templates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Rationale,
    Random,
}

impl MaskSource {
    pub fn tag(self) -> &'static str {
        match self {
            MaskSource::Rationale => "rationale",
            MaskSource::Random => "random",
        }
    }
}

/// One ablation arm: how the generator is trained (`None` leaves it at its
/// random initialization) and which masks it fills at generation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantSpec {
    pub name: &'static str,
    pub train: Option<(MaskSource, f64)>,
    pub generate: MaskSource,
}

/// The six-arm grid: untrained, likelihood-only split by mask source, and
/// likelihood plus unlikelihood at weight `alpha` on both mask sources.
pub fn ablation_grid(alpha: f64) -> Vec<VariantSpec> {
    vec![
        VariantSpec {
            name: "no_train",
            train: None,
            generate: MaskSource::Random,
        },
        VariantSpec {
            name: "mle_random_random",
            train: Some((MaskSource::Random, 0.0)),
            generate: MaskSource::Random,
        },
        VariantSpec {
            name: "mle_random_rationale",
            train: Some((MaskSource::Random, 0.0)),
            generate: MaskSource::Rationale,
        },
        VariantSpec {
            name: "mle_rationale_rationale",
            train: Some((MaskSource::Rationale, 0.0)),
            generate: MaskSource::Rationale,
        },
        VariantSpec {
            name: "mle_ul_random_random",
            train: Some((MaskSource::Random, alpha)),
            generate: MaskSource::Random,
        },
        VariantSpec {
            name: "mle_ul_rationale_rationale",
            train: Some((MaskSource::Rationale, alpha)),
            generate: MaskSource::Rationale,
        },
    ]
}

/// Knobs shared by the grid and the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub classifier_train: TrainSettings,
    pub generator_train: TrainSettings,
    pub decode: DecodeSettings,
    /// Rationale percentage; defaults to the task's planted density.
    pub pi: Option<f64>,
    /// Unlikelihood weight for the mle_ul arms.
    pub alpha: f64,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            classifier_train: TrainSettings::classifier_default(),
            generator_train: TrainSettings::generator_default(),
            decode: DecodeSettings::default(),
            pi: None,
            alpha: 0.3,
            seeds: vec![1, 2, 3],
        }
    }
}

/// One grid row, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub train_mask: String,
    pub gen_mask: String,
    pub flipping_rate: f64,
    pub distinct3: f64,
    pub distinct4: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,train_mask,gen_mask,flipping_rate,distinct3,distinct4,seeds\n");
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{}",
                row.variant,
                row.train_mask,
                row.gen_mask,
                row.flipping_rate,
                row.distinct3,
                row.distinct4,
                row.seeds
            )
            .expect("writing to a string cannot fail");
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Everything one seed's arms share: the corpus, the oracle, both template
/// sets, a vocabulary covering all of them, and the decode settings.
struct SeedContext {
    oracle: TriggerOracle,
    label_count: usize,
    rationale_templates: Vec<MaskedTemplate>,
    rationale_dev: Vec<MaskedTemplate>,
    random_templates: Vec<MaskedTemplate>,
    random_dev: Vec<MaskedTemplate>,
    vocab: crate::modelkit::GenVocab,
    decode: DecodeConfig,
    model_seed: u64,
}

fn prepare_seed(
    task: &SyntheticTask,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<SeedContext> {
    let mut seeded_task = task.clone();
    seeded_task.seed = derive_seed(seed, &["ablation-corpus"]);
    let oracle = TriggerOracle::new(&seeded_task)?;
    let data = TaskData::from_config(&TaskConfig::Synthetic { task: seeded_task })?;
    let tokenizer = WhitespaceTokenizer;
    let train_tok = tokenize_dataset(&data.train, &tokenizer)?;
    let dev_tok = tokenize_dataset(&data.dev, &tokenizer)?;
    let pi = config.pi.or(data.suggested_pi()).ok_or_else(|| {
        Error::InvalidConfig("no pi configured and the task has no planted density".into())
    })?;

    let vocab = classifier_vocab(&[&train_tok]);
    let mut classifier = ReferenceClassifier::new(
        vocab,
        data.label_count(),
        data.schema.segment_count(),
        ClassifierDims::default(),
        derive_seed(seed, &["ablation-clf-model"]),
    )?;
    let clf_config = config.classifier_train.to_train_config(
        derive_seed(seed, &["ablation-clf-train"]),
        SelectionMetric::DevAccuracy,
    );
    train_classifier(&train_tok, &dev_tok, &clf_config, &mut classifier)?;

    let (rationale_sel, _) = extract_rationales(&classifier, &train_tok, pi)?;
    let (rationale_dev_sel, _) = extract_rationales(&classifier, &dev_tok, pi)?;
    let rationale_templates = templates_from_selections(&train_tok, &rationale_sel)?;
    let rationale_dev = templates_from_selections(&dev_tok, &rationale_dev_sel)?;
    if rationale_templates.is_empty() || rationale_dev.is_empty() {
        return Err(Error::InsufficientData(
            "the classifier predicted too little correctly to mask anything".into(),
        ));
    }

    let mask_seed = derive_seed(seed, &["ablation-random-mask"]);
    let random_sel = random_selections(&train_tok, pi, mask_seed)?;
    let random_dev_sel = random_selections(&dev_tok, pi, mask_seed)?;
    let random_templates = templates_from_selections(&train_tok, &random_sel)?;
    let random_dev = templates_from_selections(&dev_tok, &random_dev_sel)?;

    let vocab = generator_vocab(&[
        &rationale_templates,
        &rationale_dev,
        &random_templates,
        &random_dev,
    ]);

    Ok(SeedContext {
        oracle,
        label_count: data.label_count(),
        rationale_templates,
        rationale_dev,
        random_templates,
        random_dev,
        vocab,
        decode: config.decode.to_decode_config(derive_seed(seed, &["ablation-decode"])),
        model_seed: derive_seed(seed, &["ablation-gen-model"]),
    })
}

impl SeedContext {
    fn templates(&self, source: MaskSource) -> (&[MaskedTemplate], &[MaskedTemplate]) {
        match source {
            MaskSource::Rationale => (&self.rationale_templates, &self.rationale_dev),
            MaskSource::Random => (&self.random_templates, &self.random_dev),
        }
    }

    fn untrained(&self) -> Result<ReferenceGenerator> {
        ReferenceGenerator::new(
            self.vocab.clone(),
            self.label_count,
            GeneratorDims::default(),
            self.model_seed,
        )
    }
}

/// Distinct-n, with an empty n-gram pool scored as zero diversity rather
/// than an error, so degenerate generators still produce a comparable row.
fn distinct_or_zero(texts: &[String], n: usize) -> Result<f64> {
    match distinct_n(texts, n) {
        Ok(value) => Ok(value),
        Err(Error::UndefinedMetric(_)) => Ok(0.0),
        Err(other) => Err(other),
    }
}

fn score_candidates(
    context: &SeedContext,
    generator: &ReferenceGenerator,
    source: MaskSource,
) -> Result<(f64, f64, f64)> {
    let (templates, _) = context.templates(source);
    let candidates = generate_candidates(generator, templates, &context.decode)?;
    let fr = flipping_rate(&candidates, &Judge::Oracle(&context.oracle))?;
    let texts: Vec<String> = candidates.iter().map(candidate_span_text).collect();
    let d3 = distinct_or_zero(&texts, 3)?;
    let d4 = distinct_or_zero(&texts, 4)?;
    Ok((fr, d3, d4))
}

fn ablation_scores_for_seed(
    task: &SyntheticTask,
    config: &ExperimentConfig,
    grid: &[VariantSpec],
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    let context = prepare_seed(task, config, seed)?;
    let mut trained: Vec<((MaskSource, u64), ReferenceGenerator)> = Vec::new();
    let mut scores = Vec::with_capacity(grid.len());
    for spec in grid {
        let generator = match spec.train {
            None => context.untrained()?,
            Some((source, alpha)) => {
                let key = (source, alpha.to_bits());
                if let Some((_, cached)) = trained.iter().find(|(k, _)| *k == key) {
                    cached.clone()
                } else {
                    let (templates, dev) = context.templates(source);
                    let mut generator = context.untrained()?;
                    let objective = InfillObjective { alpha };
                    let train_config = config.generator_train.to_train_config(
                        derive_seed(seed, &["ablation-gen-train", source.tag()]),
                        SelectionMetric::DevPerplexity,
                    );
                    train_generator(templates, dev, &objective, &train_config, &mut generator)?;
                    trained.push((key, generator.clone()));
                    generator
                }
            }
        };
        scores.push(score_candidates(&context, &generator, spec.generate)?);
    }
    Ok(scores)
}

/// Run the six-arm grid over every seed and average. Row order follows
/// [`ablation_grid`].
pub fn run_ablation(task: &SyntheticTask, config: &ExperimentConfig) -> Result<AblationTable> {
    if config.seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let grid = ablation_grid(config.alpha);
    let mut sums = vec![(0.0, 0.0, 0.0); grid.len()];
    for &seed in &config.seeds {
        let scores = ablation_scores_for_seed(task, config, &grid, seed)?;
        for (sum, score) in sums.iter_mut().zip(scores) {
            sum.0 += score.0;
            sum.1 += score.1;
            sum.2 += score.2;
        }
    }
    let n = config.seeds.len() as f64;
    let rows = grid
        .iter()
        .zip(sums)
        .map(|(spec, (fr, d3, d4))| AblationRow {
            variant: spec.name.to_string(),
            train_mask: spec
                .train
                .map_or("none".to_string(), |(source, _)| source.tag().to_string()),
            gen_mask: spec.generate.tag().to_string(),
            flipping_rate: fr / n,
            distinct3: d3 / n,
            distinct4: d4 / n,
            seeds: config.seeds.len(),
        })
        .collect();
    Ok(AblationTable { rows })
}

/// One unlikelihood-weight setting's scores, at a single seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub flipping_rate: f64,
    pub distinct4: f64,
    pub dev_perplexity: f64,
}

/// Sweep the unlikelihood weight on rationale-masked templates. Everything
/// except `alpha` is held fixed: same corpus, same masks, same generator
/// initialization, same batch order, same decode streams.
pub fn alpha_sweep(
    task: &SyntheticTask,
    alphas: &[f64],
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<AlphaRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidConfig("alpha sweep needs at least one value".into()));
    }
    let context = prepare_seed(task, config, seed)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let objective = InfillObjective { alpha };
        objective.validate()?;
        let mut generator = context.untrained()?;
        let train_config = config.generator_train.to_train_config(
            derive_seed(seed, &["ablation-gen-train", MaskSource::Rationale.tag()]),
            SelectionMetric::DevPerplexity,
        );
        let report = train_generator(
            &context.rationale_templates,
            &context.rationale_dev,
            &objective,
            &train_config,
            &mut generator,
        )?;
        let dev_perplexity = match report.best_metric {
            Some(metric) => metric,
            None => crate::infill::perplexity(&generator, &context.rationale_dev)?,
        };
        let (fr, _, d4) = score_candidates(&context, &generator, MaskSource::Rationale)?;
        rows.push(AlphaRow {
            alpha,
            flipping_rate: fr,
            distinct4: d4,
            dev_perplexity,
        });
    }
    Ok(rows)
}

pub fn save_alpha_csv(rows: &[AlphaRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("alpha,flipping_rate,distinct4,dev_perplexity\n");
    for row in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            row.alpha, row.flipping_rate, row.distinct4, row.dev_perplexity
        )
        .expect("writing to a string cannot fail");
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
