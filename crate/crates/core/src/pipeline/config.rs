//! Run configuration: one struct, loadable from a TOML file, that fixes
//! every knob of an augmentation run. Callers (CLI flags, tests) override
//! individual fields after loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkTokenizer, SyntheticTask, Tokenizer, WhitespaceTokenizer};
use crate::error::{Error, Result};
use crate::filterkit::FilterConfig;
use crate::infill::{DecodeConfig, DecodeMode};
use crate::modelkit::{InfillObjective, SelectionMetric, TrainConfig};

/// Where the corpus comes from: generated on the fly or loaded from JSONL
/// files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Synthetic {
        #[serde(flatten)]
        task: SyntheticTask,
    },
    Files {
        labels: Vec<String>,
        #[serde(default)]
        pair_mode: bool,
        train: PathBuf,
        dev: PathBuf,
        test_id: PathBuf,
        #[serde(default)]
        test_ood: Option<PathBuf>,
        /// Optional golden rationales for agreement scoring.
        #[serde(default)]
        golden: Option<PathBuf>,
    },
}

impl TaskConfig {
    pub fn is_pair_mode(&self) -> bool {
        match self {
            TaskConfig::Synthetic { task } => task.pair_mode,
            TaskConfig::Files { pair_mode, .. } => *pair_mode,
        }
    }
}

/// Subtokenizer choice. Whitespace keeps words whole; chunk splits each word
/// into fixed-length pieces, exercising the word/subtoken alignment paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerChoice {
    Whitespace,
    Chunk { piece_len: usize },
}

impl Default for TokenizerChoice {
    fn default() -> Self {
        TokenizerChoice::Whitespace
    }
}

impl TokenizerChoice {
    pub fn build(&self) -> Result<Box<dyn Tokenizer>> {
        match self {
            TokenizerChoice::Whitespace => Ok(Box::new(WhitespaceTokenizer)),
            TokenizerChoice::Chunk { piece_len } => Ok(Box::new(ChunkTokenizer::new(*piece_len)?)),
        }
    }
}

/// Optimizer settings minus the seed and selection metric, which the
/// pipeline derives per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
}

impl TrainSettings {
    pub fn classifier_default() -> Self {
        let base = TrainConfig::classifier_default(0);
        TrainSettings {
            learning_rate: base.learning_rate,
            batch_size: base.batch_size,
            max_epochs: base.max_epochs,
            patience: base.patience,
            eval_every: base.eval_every,
        }
    }

    pub fn generator_default() -> Self {
        let base = TrainConfig::generator_default(0);
        TrainSettings {
            learning_rate: base.learning_rate,
            batch_size: base.batch_size,
            max_epochs: base.max_epochs,
            patience: base.patience,
            eval_every: base.eval_every,
        }
    }

    pub fn to_train_config(&self, seed: u64, selection: SelectionMetric) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            eval_every: self.eval_every,
            seed,
            selection,
        }
    }
}

/// Decoding settings minus the seed, which comes from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub mode: DecodeMode,
    pub max_span_tokens: usize,
    /// Candidates sampled per (example, flipped target).
    pub num_samples: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            mode: DecodeMode::Nucleus {
                top_p: 0.9,
                temperature: 1.0,
            },
            max_span_tokens: 6,
            num_samples: 1,
        }
    }
}

impl DecodeSettings {
    pub fn to_decode_config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            mode: self.mode,
            max_span_tokens: self.max_span_tokens,
            num_samples: self.num_samples,
            seed,
        }
    }
}

/// How counterfactual examples enter the retraining objective: as ordinary
/// labeled examples (`ce`) or as "not the original label" evidence (`cf`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainLoss {
    #[default]
    Ce,
    Cf,
}

/// How candidates are chosen after generation: keep everything the
/// classifier reads as the target, or keep the single highest-confidence
/// candidate per (example, target) group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    ConsistencyFilter,
    BestProbability,
}

/// Optional comparison baseline for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineChoice {
    RandomMaskNotrain,
    SynonymReplace,
}

fn default_duplication() -> usize {
    1
}

/// Everything an augmentation run needs. Field defaults match the reference
/// setup, so a config file only has to name the task and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: TaskConfig,
    /// Percent of words to treat as rationale. Defaults to the planted
    /// trigger density for synthetic tasks; file-based tasks must set it.
    #[serde(default)]
    pub pi: Option<f64>,
    /// Unlikelihood weight. Defaults to 1.0 for pair tasks and 0.3 for
    /// single-text tasks.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub tokenizer: TokenizerChoice,
    #[serde(default)]
    pub decode: DecodeSettings,
    #[serde(default = "TrainSettings::classifier_default")]
    pub classifier_train: TrainSettings,
    #[serde(default = "TrainSettings::generator_default")]
    pub generator_train: TrainSettings,
    #[serde(default)]
    pub retrain_loss: RetrainLoss,
    #[serde(default)]
    pub selection_mode: SelectionMode,
    #[serde(default)]
    pub filter: FilterConfig,
    /// How many copies of each accepted counterfactual the merged training
    /// set carries.
    #[serde(default = "default_duplication")]
    pub duplication_factor: usize,
    #[serde(default)]
    pub baseline: Option<BaselineChoice>,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    /// A ready-to-run configuration around a synthetic task.
    pub fn synthetic(task: SyntheticTask, seed: u64) -> Self {
        PipelineConfig {
            task: TaskConfig::Synthetic { task },
            pi: None,
            alpha: None,
            tokenizer: TokenizerChoice::default(),
            decode: DecodeSettings::default(),
            classifier_train: TrainSettings::classifier_default(),
            generator_train: TrainSettings::generator_default(),
            retrain_loss: RetrainLoss::default(),
            selection_mode: SelectionMode::default(),
            filter: FilterConfig::default(),
            duplication_factor: 1,
            baseline: None,
            seed,
        }
    }

    /// The effective unlikelihood weight: an explicit `alpha` wins, else the
    /// task-shape default.
    pub fn objective(&self) -> InfillObjective {
        let alpha = self
            .alpha
            .unwrap_or(if self.task.is_pair_mode() { 1.0 } else { 0.3 });
        InfillObjective { alpha }
    }

    pub fn validate(&self) -> Result<()> {
        if let TaskConfig::Synthetic { task } = &self.task {
            task.validate()?;
        }
        if matches!(self.task, TaskConfig::Files { .. }) && self.pi.is_none() {
            return Err(Error::InvalidConfig(
                "file-based tasks must set pi explicitly".into(),
            ));
        }
        if let Some(pi) = self.pi {
            if !pi.is_finite() || pi <= 0.0 || pi > 100.0 {
                return Err(Error::InvalidConfig(format!(
                    "pi must lie in (0, 100], got {pi}"
                )));
            }
        }
        self.objective().validate()?;
        self.decode.to_decode_config(0).validate()?;
        self.filter.validate()?;
        if self.duplication_factor == 0 {
            return Err(Error::InvalidConfig(
                "duplication_factor must be at least 1".into(),
            ));
        }
        self.classifier_train
            .to_train_config(0, SelectionMetric::DevAccuracy)
            .validate()?;
        self.generator_train
            .to_train_config(0, SelectionMetric::DevPerplexity)
            .validate()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig = toml::from_str(&raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))?;
        std::fs::write(path, raw).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_config_round_trips_through_toml() {
        let config = PipelineConfig::synthetic(SyntheticTask::binary(3), 42);
        let raw = toml::to_string_pretty(&config).unwrap();
        let back: PipelineConfig = toml::from_str(&raw).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn minimal_toml_fills_in_defaults() {
        let raw = r#"
            seed = 7

            [task]
            kind = "synthetic"
            labels = ["neg", "pos"]

            [task.triggers]
            neg = ["awful"]
            pos = ["great"]
        "#;
        let config: PipelineConfig = toml::from_str(raw).unwrap();
        config.validate().unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.duplication_factor, 1);
        assert_eq!(config.retrain_loss, RetrainLoss::Ce);
        assert_eq!(config.selection_mode, SelectionMode::ConsistencyFilter);
        assert!(matches!(
            config.decode.mode,
            DecodeMode::Nucleus { top_p, .. } if (top_p - 0.9).abs() < 1e-12
        ));
        assert_eq!(config.classifier_train.batch_size, 32);
        assert_eq!(config.generator_train.max_epochs, 8);
    }

    #[test]
    fn alpha_defaults_follow_task_shape() {
        let mut config = PipelineConfig::synthetic(SyntheticTask::binary(3), 1);
        assert!((config.objective().alpha - 0.3).abs() < 1e-12);
        if let TaskConfig::Synthetic { task } = &mut config.task {
            task.pair_mode = true;
        }
        assert!((config.objective().alpha - 1.0).abs() < 1e-12);
        config.alpha = Some(0.5);
        assert!((config.objective().alpha - 0.5).abs() < 1e-12);
    }

    #[test]
    fn files_tasks_must_pin_pi() {
        let raw = r#"
            seed = 1

            [task]
            kind = "files"
            labels = ["neg", "pos"]
            train = "train.jsonl"
            dev = "dev.jsonl"
            test_id = "test_id.jsonl"
        "#;
        let config: PipelineConfig = toml::from_str(raw).unwrap();
        assert!(matches!(
            config.validate(),
            Err(Error::InvalidConfig(_))
        ));
        let mut fixed = config;
        fixed.pi = Some(30.0);
        fixed.validate().unwrap();
    }

    #[test]
    fn validation_rejects_broken_knobs() {
        let mut config = PipelineConfig::synthetic(SyntheticTask::binary(3), 1);
        config.pi = Some(150.0);
        assert!(config.validate().is_err());

        let mut config = PipelineConfig::synthetic(SyntheticTask::binary(3), 1);
        config.duplication_factor = 0;
        assert!(config.validate().is_err());

        let mut config = PipelineConfig::synthetic(SyntheticTask::binary(3), 1);
        config.decode.num_samples = 0;
        assert!(config.validate().is_err());

        let mut config = PipelineConfig::synthetic(SyntheticTask::binary(3), 1);
        config.alpha = Some(-1.0);
        assert!(config.validate().is_err());
    }

    #[test]
    fn tokenizer_choice_builds_both_kinds() {
        assert_eq!(TokenizerChoice::default().build().unwrap().name(), "whitespace");
        let chunk = TokenizerChoice::Chunk { piece_len: 3 }.build().unwrap();
        assert_eq!(chunk.split_word("abcdefg").len(), 3);
        assert!(TokenizerChoice::Chunk { piece_len: 0 }.build().is_err());
    }
}
