//! Command line front end: every pipeline stage as its own subcommand, the
//! end-to-end augmentation run, the experiment harnesses, and the comparison
//! baselines. Stage subcommands read and write the same artifact files as
//! `augment`, with the same derived seeds, so an interrupted run can be
//! picked up at any stage and reproduce the one-shot result byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use counterfact::corpus::{
    save_dataset, save_rationale_annotations, tokenize_dataset, SyntheticTask, TokenizedDataset,
};
use counterfact::derive_seed;
use counterfact::filterkit::{accepted_candidates, best_probability_select, consistency_filter};
use counterfact::infill::{generate_candidates, CounterfactualCandidate, DecodeMode, MaskedTemplate};
use counterfact::metrics::evaluate_classifier;
use counterfact::modelkit::{
    train_classifier, train_generator, ClassifierDims, GeneratorDims, ReferenceClassifier,
    ReferenceGenerator, SelectionMetric, TrainingReport,
};
use counterfact::pipeline::baselines::{
    random_mask_notrain_baseline, synonym_baseline, synthetic_synonym_lexicon,
};
use counterfact::pipeline::experiments::{
    alpha_sweep, run_ablation, save_alpha_csv, ExperimentConfig,
};
use counterfact::pipeline::{
    classifier_vocab, generator_vocab, load_jsonl, merge_augmented, retrain_with_cad, run_augment,
    save_jsonl, templates_from_selections, BaselineChoice, PipelineConfig, RetrainLoss,
    SelectionMode, TaskConfig, TaskData,
};
use counterfact::rationale::noise::{noise_experiment, MaskTarget, NoiseConfig};
use counterfact::rationale::{extract_rationales, save_selections};

#[derive(Parser)]
#[command(
    name = "counterfact",
    version,
    about = "Counterfactually augmented data for text classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trigger-word corpus and write its splits.
    MakeSynthetic(MakeSyntheticArgs),
    /// Train the task classifier and save its checkpoint.
    TrainClassifier(StageArgs),
    /// Select rationale words by gradient saliency and build slot templates.
    ExtractRationales(StageArgs),
    /// Train the label-conditioned infilling generator on the templates.
    TrainGenerator(StageArgs),
    /// Decode counterfactual candidates for every flipped label.
    Generate(StageArgs),
    /// Filter candidates and merge survivors into the training set.
    Filter(StageArgs),
    /// Run the whole augmentation pipeline into a run directory.
    Augment(StageArgs),
    /// Retrain on originals plus accepted counterfactuals and evaluate.
    Retrain(StageArgs),
    /// Evaluate a classifier checkpoint on every split.
    Evaluate(EvaluateArgs),
    /// Score the mask-source and training-objective grid.
    Ablate(AblateArgs),
    /// Sweep the unlikelihood weight at fixed masks and seeds.
    AlphaSweep(AlphaSweepArgs),
    /// Compare masking rationales against masking other words.
    NoiseExperiment(NoiseArgs),
    /// Run a comparison baseline end to end.
    Baseline(BaselineArgs),
}

/// Config file plus the overrides shared by every subcommand. Flags win over
/// file values; anything left unset keeps the file's (or type's) default.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Run seed. Required for augment, optional elsewhere.
    #[arg(long)]
    seed: Option<u64>,
    /// Percent of words treated as rationale.
    #[arg(long)]
    pi: Option<f64>,
    /// Unlikelihood weight on the generator objective.
    #[arg(long)]
    alpha: Option<f64>,
    /// Nucleus probability mass.
    #[arg(long)]
    top_p: Option<f64>,
    /// Softmax temperature for sampling.
    #[arg(long)]
    temperature: Option<f64>,
    /// Hard cap on decoded tokens per slot.
    #[arg(long)]
    max_span_tokens: Option<usize>,
    /// Candidates decoded per (example, flipped label).
    #[arg(long)]
    num_samples: Option<usize>,
    /// Probability floor a kept candidate must clear.
    #[arg(long)]
    min_probability: Option<f64>,
    /// How candidates are chosen after generation.
    #[arg(long, value_enum)]
    selection_mode: Option<SelectionModeArg>,
    /// How counterfactuals enter the retraining objective.
    #[arg(long, value_enum)]
    retrain_loss: Option<RetrainLossArg>,
    /// Copies of each accepted counterfactual in the merged set.
    #[arg(long)]
    duplication_factor: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut config = PipelineConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(pi) = self.pi {
            config.pi = Some(pi);
        }
        if let Some(alpha) = self.alpha {
            config.alpha = Some(alpha);
        }
        if self.top_p.is_some() || self.temperature.is_some() {
            let (top_p, temperature) = match config.decode.mode {
                DecodeMode::Nucleus { top_p, temperature } => (top_p, temperature),
                DecodeMode::Greedy => (0.9, 1.0),
            };
            config.decode.mode = DecodeMode::Nucleus {
                top_p: self.top_p.unwrap_or(top_p),
                temperature: self.temperature.unwrap_or(temperature),
            };
        }
        if let Some(cap) = self.max_span_tokens {
            config.decode.max_span_tokens = cap;
        }
        if let Some(n) = self.num_samples {
            config.decode.num_samples = n;
        }
        if let Some(p) = self.min_probability {
            config.filter.min_probability = Some(p);
        }
        if let Some(mode) = self.selection_mode {
            config.selection_mode = mode.into();
        }
        if let Some(loss) = self.retrain_loss {
            config.retrain_loss = loss.into();
        }
        if let Some(k) = self.duplication_factor {
            config.duplication_factor = k;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory holding the pipeline artifacts.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct MakeSyntheticArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory the splits are written into.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Classifier checkpoint to score.
    #[arg(long)]
    model: PathBuf,
    /// Optional JSON file for the per-split accuracies.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// CSV file for the grid.
    #[arg(long)]
    out: PathBuf,
    /// Seeds averaged per arm.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct AlphaSweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// CSV file for the sweep.
    #[arg(long)]
    out: PathBuf,
    /// Unlikelihood weights to score, e.g. 0,0.3,1.0.
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// CSV file for the accuracy grid.
    #[arg(long)]
    out: PathBuf,
    /// Mask ratios in percent.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Seeds averaged per cell.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Examples take part only if their rationale covers more subtokens.
    #[arg(long)]
    min_rationale_subtokens: Option<usize>,
    /// Epoch budget for the masked retrains, when the base classifier's
    /// schedule would let them converge past the corruption.
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Learning rate for the masked retrains.
    #[arg(long)]
    retrain_lr: Option<f64>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory the baseline's artifacts are written into.
    #[arg(long)]
    out: PathBuf,
    /// Which baseline to run; defaults to the config's `baseline` entry.
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    /// Percent of words replaced per example for synonym replacement.
    #[arg(long, default_value_t = 30.0)]
    percent: f64,
    /// JSON file mapping each word to its synonym list.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// File with one stopword per line; stopwords are never replaced.
    #[arg(long)]
    stopwords: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionModeArg {
    ConsistencyFilter,
    BestProbability,
}

impl From<SelectionModeArg> for SelectionMode {
    fn from(arg: SelectionModeArg) -> Self {
        match arg {
            SelectionModeArg::ConsistencyFilter => SelectionMode::ConsistencyFilter,
            SelectionModeArg::BestProbability => SelectionMode::BestProbability,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrainLossArg {
    Ce,
    Cf,
}

impl From<RetrainLossArg> for RetrainLoss {
    fn from(arg: RetrainLossArg) -> Self {
        match arg {
            RetrainLossArg::Ce => RetrainLoss::Ce,
            RetrainLossArg::Cf => RetrainLoss::Cf,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    RandomMaskNotrain,
    SynonymReplace,
}

impl From<BaselineArg> for BaselineChoice {
    fn from(arg: BaselineArg) -> Self {
        match arg {
            BaselineArg::RandomMaskNotrain => BaselineChoice::RandomMaskNotrain,
            BaselineArg::SynonymReplace => BaselineChoice::SynonymReplace,
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::MakeSynthetic(args) => cmd_make_synthetic(args),
        Command::TrainClassifier(args) => cmd_train_classifier(args),
        Command::ExtractRationales(args) => cmd_extract_rationales(args),
        Command::TrainGenerator(args) => cmd_train_generator(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Retrain(args) => cmd_retrain(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::AlphaSweep(args) => cmd_alpha_sweep(args),
        Command::NoiseExperiment(args) => cmd_noise_experiment(args),
        Command::Baseline(args) => cmd_baseline(args),
    }
}

// ---------------------------------------------------------------------------
// Stage subcommands
// ---------------------------------------------------------------------------

fn cmd_make_synthetic(args: MakeSyntheticArgs) -> Result<()> {
    let config = args.config.load()?;
    if !matches!(config.task, TaskConfig::Synthetic { .. }) {
        bail!("make-synthetic needs a synthetic task in the config");
    }
    let data = TaskData::from_config(&config.task)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    save_dataset(&data.train, args.out.join("train.jsonl"))?;
    save_dataset(&data.dev, args.out.join("dev.jsonl"))?;
    save_dataset(&data.test_id, args.out.join("test_id.jsonl"))?;
    if let Some(ood) = &data.test_ood {
        save_dataset(ood, args.out.join("test_ood.jsonl"))?;
    }
    if let Some(golden) = &data.golden {
        save_rationale_annotations(golden, args.out.join("golden.jsonl"))?;
    }
    println!("labels         {}", data.label_count());
    println!("train          {}", data.train.len());
    println!("dev            {}", data.dev.len());
    println!("test_id        {}", data.test_id.len());
    if let Some(ood) = &data.test_ood {
        println!("test_ood       {}", ood.len());
    }
    println!("wrote splits to {}", args.out.display());
    Ok(())
}

fn cmd_train_classifier(args: StageArgs) -> Result<()> {
    let config = args.config.load()?;
    let data = TaskData::from_config(&config.task)?;
    let tokenizer = config.tokenizer.build()?;
    fs::create_dir_all(&args.run)
        .with_context(|| format!("creating {}", args.run.display()))?;
    let train_tok = tokenize_dataset(&data.train, tokenizer.as_ref())?;
    let dev_tok = tokenize_dataset(&data.dev, tokenizer.as_ref())?;
    let (classifier, report) = fit_classifier(&config, &data, &train_tok, &dev_tok)?;
    let path = args.run.join("classifier.json");
    classifier.save(&path)?;
    println!("epochs run     {}", report.epochs_run);
    if let Some(metric) = report.best_metric {
        println!("dev accuracy   {metric:.4}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_extract_rationales(args: StageArgs) -> Result<()> {
    let config = args.config.load()?;
    let data = TaskData::from_config(&config.task)?;
    let tokenizer = config.tokenizer.build()?;
    let classifier = load_classifier(&args.run.join("classifier.json"))?;
    let train_tok = tokenize_dataset(&data.train, tokenizer.as_ref())?;
    let dev_tok = tokenize_dataset(&data.dev, tokenizer.as_ref())?;
    let pi = data.resolve_pi(&config)?;

    let (selections, report) = extract_rationales(&classifier, &train_tok, pi)?;
    let (dev_selections, _) = extract_rationales(&classifier, &dev_tok, pi)?;
    save_selections(&selections, args.run.join("selections.jsonl"))?;
    save_selections(&dev_selections, args.run.join("selections_dev.jsonl"))?;

    let templates = templates_from_selections(&train_tok, &selections)?;
    let dev_templates = templates_from_selections(&dev_tok, &dev_selections)?;
    if templates.is_empty() || dev_templates.is_empty() {
        bail!("no usable templates; the classifier got nothing right");
    }
    save_jsonl(&templates, args.run.join("templates.jsonl"))?;
    save_jsonl(&dev_templates, args.run.join("templates_dev.jsonl"))?;

    println!("pi             {pi:.2}");
    println!("kept           {} of {}", report.kept, report.total);
    println!(
        "skipped        {} mispredicted, {} degenerate",
        report.skipped_mispredicted, report.skipped_degenerate
    );
    println!("templates      {} train, {} dev", templates.len(), dev_templates.len());
    Ok(())
}

fn cmd_train_generator(args: StageArgs) -> Result<()> {
    let config = args.config.load()?;
    let data = TaskData::from_config(&config.task)?;
    let templates: Vec<MaskedTemplate> = load_jsonl(args.run.join("templates.jsonl"))?;
    let dev_templates: Vec<MaskedTemplate> = load_jsonl(args.run.join("templates_dev.jsonl"))?;

    let vocab = generator_vocab(&[&templates, &dev_templates]);
    let mut generator = ReferenceGenerator::new(
        vocab,
        data.label_count(),
        GeneratorDims::default(),
        derive_seed(config.seed, &["generator-model"]),
    )?;
    let train_config = config.generator_train.to_train_config(
        derive_seed(config.seed, &["generator-train"]),
        SelectionMetric::DevPerplexity,
    );
    let objective = config.objective();
    let report =
        train_generator(&templates, &dev_templates, &objective, &train_config, &mut generator)?;
    let path = args.run.join("generator.json");
    generator.save(&path)?;

    println!("alpha          {}", objective.alpha);
    println!("epochs run     {}", report.epochs_run);
    if let Some(metric) = report.best_metric {
        println!("dev perplexity {metric:.4}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_generate(args: StageArgs) -> Result<()> {
    let config = args.config.load()?;
    let data = TaskData::from_config(&config.task)?;
    let generator = ReferenceGenerator::load(args.run.join("generator.json"))
        .with_context(|| format!("loading generator from {}", args.run.display()))?;
    let templates: Vec<MaskedTemplate> = load_jsonl(args.run.join("templates.jsonl"))?;

    let decode = config.decode.to_decode_config(config.seed);
    let candidates = generate_candidates(&generator, &templates, &decode)?;
    let expected = templates.len() * (data.label_count() - 1) * decode.num_samples;
    if candidates.len() != expected {
        bail!("expected {expected} candidates, decoded {}", candidates.len());
    }
    save_jsonl(&candidates, args.run.join("candidates.jsonl"))?;

    println!("candidates     {}", candidates.len());
    println!(
        "degenerate     {}",
        candidates.iter().filter(|c| c.degenerate).count()
    );
    println!(
        "truncated      {}",
        candidates.iter().filter(|c| c.truncated).count()
    );
    Ok(())
}

fn cmd_filter(args: StageArgs) -> Result<()> {
    let config = args.config.load()?;
    let data = TaskData::from_config(&config.task)?;
    let tokenizer = config.tokenizer.build()?;
    let classifier = load_classifier(&args.run.join("classifier.json"))?;
    let candidates: Vec<CounterfactualCandidate> =
        load_jsonl(args.run.join("candidates.jsonl"))?;

    let (records, report) = match config.selection_mode {
        SelectionMode::ConsistencyFilter => {
            consistency_filter(&candidates, &classifier, tokenizer.as_ref(), &config.filter)?
        }
        SelectionMode::BestProbability => {
            best_probability_select(&candidates, &classifier, tokenizer.as_ref(), &config.filter)?
        }
    };
    let accepted = accepted_candidates(&records);
    save_jsonl(&records, args.run.join("filtered.jsonl"))?;
    save_jsonl(&accepted, args.run.join("accepted.jsonl"))?;
    write_json(&report, &args.run.join("filter_report.json"))?;

    let augmented = merge_augmented(&data.train, &accepted, config.duplication_factor)?;
    save_dataset(&augmented, args.run.join("augmented_train.jsonl"))?;

    println!(
        "accepted       {} of {} (rate {:.4})",
        accepted.len(),
        records.len(),
        report.acceptance_rate
    );
    println!("augmented size {}", augmented.len());
    Ok(())
}

fn cmd_augment(args: StageArgs) -> Result<()> {
    if args.config.seed.is_none() {
        bail!("augment requires an explicit --seed");
    }
    let config = args.config.load()?;
    let outcome = run_augment(&config, &args.run)
        .with_context(|| format!("augmentation run in {}", args.run.display()))?;
    for stage in &outcome.manifest.stages {
        println!(
            "{:<18} {:>6.2}s  {}",
            stage.name,
            stage.seconds,
            format_counts(&stage.counts)
        );
    }
    println!(
        "accepted {} of {} candidates (rate {:.4})",
        outcome.accepted.len(),
        outcome.records.len(),
        outcome.filter_report.acceptance_rate
    );
    println!(
        "augmented training set: {} examples ({} counterfactual rows)",
        outcome.augmented_train.len(),
        outcome.augmented_train.len() - outcome.data.train.len()
    );
    println!("artifacts in {}", args.run.display());
    Ok(())
}

fn cmd_retrain(args: StageArgs) -> Result<()> {
    let config = args.config.load()?;
    let data = TaskData::from_config(&config.task)?;
    let tokenizer = config.tokenizer.build()?;
    let accepted: Vec<CounterfactualCandidate> = load_jsonl(args.run.join("accepted.jsonl"))?;

    let outcome = retrain_with_cad(
        &data,
        &accepted,
        config.retrain_loss,
        tokenizer.as_ref(),
        &config.classifier_train,
        ClassifierDims::default(),
        config.seed,
    )?;
    outcome.classifier.save(args.run.join("retrained_classifier.json"))?;
    write_json(&outcome.eval, &args.run.join("retrain_eval.json"))?;

    let mode = match config.retrain_loss {
        RetrainLoss::Ce => "ce",
        RetrainLoss::Cf => "cf",
    };
    println!("loss mode      {mode}");
    println!("cad examples   {}", accepted.len());
    print_eval(&outcome.eval);
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let config = args.config.load()?;
    let data = TaskData::from_config(&config.task)?;
    let tokenizer = config.tokenizer.build()?;
    let classifier = load_classifier(&args.model)?;

    let train_tok = tokenize_dataset(&data.train, tokenizer.as_ref())?;
    let dev_tok = tokenize_dataset(&data.dev, tokenizer.as_ref())?;
    let test_id_tok = tokenize_dataset(&data.test_id, tokenizer.as_ref())?;
    let test_ood_tok = data
        .test_ood
        .as_ref()
        .map(|set| tokenize_dataset(set, tokenizer.as_ref()))
        .transpose()?;

    let mut sets: Vec<(String, &TokenizedDataset)> = vec![
        ("train".to_string(), &train_tok),
        ("dev".to_string(), &dev_tok),
        ("test_id".to_string(), &test_id_tok),
    ];
    if let Some(ood) = &test_ood_tok {
        sets.push(("test_ood".to_string(), ood));
    }
    let eval = evaluate_classifier(&classifier, &sets)?;
    print_eval(&eval);
    if let Some(out) = &args.out {
        write_json(&eval, out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiment subcommands
// ---------------------------------------------------------------------------

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let config = args.config.load()?;
    let task = synthetic_task(&config)?;
    let experiment = experiment_config(&config, args.seeds);
    let table = run_ablation(task, &experiment)?;
    table.save_csv(&args.out)?;

    println!(
        "{:<24} {:>10} {:>10} {:>10}",
        "variant", "flip_rate", "distinct3", "distinct4"
    );
    for row in &table.rows {
        println!(
            "{:<24} {:>10.4} {:>10.4} {:>10.4}",
            row.variant, row.flipping_rate, row.distinct3, row.distinct4
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_alpha_sweep(args: AlphaSweepArgs) -> Result<()> {
    let config = args.config.load()?;
    let task = synthetic_task(&config)?;
    let experiment = experiment_config(&config, None);
    let rows = alpha_sweep(task, &args.alphas, &experiment, config.seed)?;
    save_alpha_csv(&rows, &args.out)?;

    println!(
        "{:>6} {:>10} {:>10} {:>14}",
        "alpha", "flip_rate", "distinct4", "dev_perplexity"
    );
    for row in &rows {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>14.4}",
            row.alpha, row.flipping_rate, row.distinct4, row.dev_perplexity
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_noise_experiment(args: NoiseArgs) -> Result<()> {
    let config = args.config.load()?;
    let data = TaskData::from_config(&config.task)?;
    let tokenizer = config.tokenizer.build()?;
    let train_tok = tokenize_dataset(&data.train, tokenizer.as_ref())?;
    let dev_tok = tokenize_dataset(&data.dev, tokenizer.as_ref())?;
    let test_id_tok = tokenize_dataset(&data.test_id, tokenizer.as_ref())?;

    let (classifier, _) = fit_classifier(&config, &data, &train_tok, &dev_tok)?;
    let pi = data.resolve_pi(&config)?;
    let (selections, report) = extract_rationales(&classifier, &train_tok, pi)?;
    println!("pi             {pi:.2}");
    println!("rationales     {} of {} examples", report.kept, report.total);

    let mut noise = NoiseConfig::new(
        config
            .classifier_train
            .to_train_config(0, SelectionMetric::DevAccuracy),
    );
    if let Some(ratios) = args.ratios {
        noise.ratios = ratios;
    }
    if let Some(seeds) = args.seeds {
        noise.seeds = seeds;
    }
    if let Some(floor) = args.min_rationale_subtokens {
        noise.min_rationale_subtokens = floor;
    }
    if let Some(epochs) = args.retrain_epochs {
        noise.train.max_epochs = epochs;
    }
    if let Some(lr) = args.retrain_lr {
        noise.train.learning_rate = lr;
    }
    let eval_sets: Vec<(String, &TokenizedDataset)> = vec![
        ("dev".to_string(), &dev_tok),
        ("test_id".to_string(), &test_id_tok),
    ];
    let table = noise_experiment(&train_tok, &dev_tok, &selections, &eval_sets, &noise)?;
    table.save_csv(&args.out)?;

    println!("eligible       {} of {}", table.eligible, table.total);
    for &ratio in &noise.ratios {
        let masked = table
            .mean_accuracy(MaskTarget::Rationales, ratio, "dev")
            .unwrap_or(f64::NAN);
        let control = table
            .mean_accuracy(MaskTarget::NonRationales, ratio, "dev")
            .unwrap_or(f64::NAN);
        println!(
            "r={ratio:<5} dev accuracy: rationales masked {masked:.4}, others masked {control:.4}, gap {:.4}",
            control - masked
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let config = args.config.load()?;
    let choice = args
        .baseline
        .map(BaselineChoice::from)
        .or(config.baseline)
        .ok_or_else(|| {
            anyhow!("no baseline selected: pass --baseline or set `baseline` in the config")
        })?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    match choice {
        BaselineChoice::RandomMaskNotrain => {
            let outcome = random_mask_notrain_baseline(&config)?;
            save_jsonl(&outcome.candidates, args.out.join("candidates.jsonl"))?;
            save_jsonl(&outcome.records, args.out.join("filtered.jsonl"))?;
            write_json(&outcome.filter_report, &args.out.join("filter_report.json"))?;
            save_jsonl(&outcome.accepted, args.out.join("accepted.jsonl"))?;
            save_dataset(&outcome.augmented_train, args.out.join("augmented_train.jsonl"))?;
            write_json(&outcome.retrain.eval, &args.out.join("eval.json"))?;
            println!("baseline       random-mask-notrain");
            println!("pi             {:.2}", outcome.pi);
            println!(
                "accepted       {} of {}",
                outcome.accepted.len(),
                outcome.candidates.len()
            );
            print_eval(&outcome.retrain.eval);
        }
        BaselineChoice::SynonymReplace => {
            let data = TaskData::from_config(&config.task)?;
            let lexicon = match &args.lexicon {
                Some(path) => {
                    let raw = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<BTreeMap<String, Vec<String>>>(&raw)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => match &data.synthetic {
                    Some(task) => synthetic_synonym_lexicon(task),
                    None => bail!("synonym replacement needs --lexicon for file-based tasks"),
                },
            };
            let stopwords = match &args.stopwords {
                Some(path) => {
                    let raw = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    raw.lines()
                        .map(str::trim)
                        .filter(|w| !w.is_empty())
                        .map(String::from)
                        .collect::<BTreeSet<String>>()
                }
                None => BTreeSet::new(),
            };
            let tokenizer = config.tokenizer.build()?;
            let (copies, outcome) = synonym_baseline(
                &data,
                &lexicon,
                args.percent,
                &stopwords,
                tokenizer.as_ref(),
                &config.classifier_train,
                ClassifierDims::default(),
                config.seed,
            )?;
            save_dataset(&copies, args.out.join("synonym_copies.jsonl"))?;
            write_json(&outcome.eval, &args.out.join("eval.json"))?;
            println!("baseline       synonym-replace");
            println!("replaced       {:.0}% target per example", args.percent);
            print_eval(&outcome.eval);
        }
    }
    println!("artifacts in {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Classifier training exactly as the end-to-end pipeline runs it, including
/// the derived seeds, so stage-wise runs reproduce `augment` byte for byte.
fn fit_classifier(
    config: &PipelineConfig,
    data: &TaskData,
    train_tok: &TokenizedDataset,
    dev_tok: &TokenizedDataset,
) -> Result<(ReferenceClassifier, TrainingReport)> {
    let vocab = classifier_vocab(&[train_tok]);
    let mut classifier = ReferenceClassifier::new(
        vocab,
        data.label_count(),
        data.schema.segment_count(),
        ClassifierDims::default(),
        derive_seed(config.seed, &["classifier-model"]),
    )?;
    let train_config = config.classifier_train.to_train_config(
        derive_seed(config.seed, &["classifier-train"]),
        SelectionMetric::DevAccuracy,
    );
    let report = train_classifier(train_tok, dev_tok, &train_config, &mut classifier)?;
    Ok((classifier, report))
}

fn load_classifier(path: &Path) -> Result<ReferenceClassifier> {
    ReferenceClassifier::load(path)
        .with_context(|| format!("loading classifier from {}", path.display()))
}

fn synthetic_task(config: &PipelineConfig) -> Result<&SyntheticTask> {
    match &config.task {
        TaskConfig::Synthetic { task } => Ok(task),
        TaskConfig::Files { .. } => bail!("this command needs a synthetic task in the config"),
    }
}

fn experiment_config(config: &PipelineConfig, seeds: Option<Vec<u64>>) -> ExperimentConfig {
    let defaults = ExperimentConfig::default();
    ExperimentConfig {
        classifier_train: config.classifier_train,
        generator_train: config.generator_train,
        decode: config.decode,
        pi: config.pi,
        alpha: config.objective().alpha,
        seeds: seeds.unwrap_or(defaults.seeds),
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let raw = serde_json::to_string_pretty(value)?;
    fs::write(path, raw).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_eval(eval: &BTreeMap<String, f64>) {
    for (name, accuracy) in eval {
        println!("{name:<14} {accuracy:.4}");
    }
}

fn format_counts(counts: &BTreeMap<String, u64>) -> String {
    counts
        .iter()
        .map(|(key, value)| format!("{key}={value}"))
        .collect::<Vec<_>>()
        .join(" ")
}
