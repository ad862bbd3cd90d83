//! Model backends. The traits describe what the pipeline needs from a
//! classifier and an infilling generator; the reference implementations are
//! small hand-rolled networks trained with explicit gradients, fast enough to
//! verify every downstream property in a test run.

mod classifier;
pub mod diagnostics;
mod generator;
pub(crate) mod math;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedDataset, TokenizedText};
use crate::error::{Error, Result};
use crate::infill::MaskedTemplate;

pub use classifier::{ClassifierDims, ReferenceClassifier};
pub use generator::{GenVocab, GeneratorDims, ReferenceGenerator};
pub use math::{clamp_prob, PROB_CEIL, PROB_FLOOR};

/// Which dev-set quantity picks the checkpoint to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Higher is better; used by classifiers.
    DevAccuracy,
    /// Lower is better; used by generators.
    DevPerplexity,
}

/// Hyperparameters shared by both training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many evaluations without improvement. 0 disables.
    pub patience: usize,
    /// Evaluate on dev every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
    pub selection: SelectionMetric,
}

impl TrainConfig {
    pub fn classifier_default(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.5,
            batch_size: 32,
            max_epochs: 12,
            patience: 0,
            eval_every: 1,
            seed,
            selection: SelectionMetric::DevAccuracy,
        }
    }

    pub fn generator_default(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            max_epochs: 8,
            patience: 0,
            eval_every: 1,
            seed,
            selection: SelectionMetric::DevPerplexity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Present on evaluation epochs.
    pub dev_metric: Option<f64>,
}

/// What a fit run did: per-epoch losses, per-evaluation dev metrics, and
/// which checkpoint was kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub selection: SelectionMetric,
    pub history: Vec<EpochRecord>,
}

impl TrainingReport {
    pub fn untrained(selection: SelectionMetric) -> Self {
        TrainingReport {
            epochs_run: 0,
            best_epoch: None,
            best_metric: None,
            selection,
            history: Vec::new(),
        }
    }
}

/// A training item for classifier fitting. `Is` pulls probability toward the
/// label (cross-entropy); `IsNot` pushes probability away from it
/// (-log(1 - P(label | x))), used when counterfactuals are trained against
/// their origin label.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub text: TokenizedText,
    pub target: TrainTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Is(usize),
    IsNot(usize),
}

impl TrainTarget {
    pub fn label(&self) -> usize {
        match *self {
            TrainTarget::Is(l) | TrainTarget::IsNot(l) => l,
        }
    }
}

/// Classification backend: probabilities, raw logits, and gradients of a
/// chosen logit with respect to each subtoken embedding.
pub trait ClassifierBackend: Send + Sync {
    fn label_count(&self) -> usize;

    fn embedding_dim(&self) -> usize;

    fn predict_proba(&self, text: &TokenizedText) -> Result<Vec<f64>>;

    /// Pre-softmax score of one label.
    fn logit(&self, label: usize, text: &TokenizedText) -> Result<f64>;

    /// d logit(label) / d e_i for every subtoken position i, each a vector of
    /// `embedding_dim` entries.
    fn embedding_gradients(&self, label: usize, text: &TokenizedText) -> Result<Vec<Vec<f64>>>;

    fn fit(
        &mut self,
        train: &[TrainItem],
        dev: &TokenizedDataset,
        config: &TrainConfig,
    ) -> Result<TrainingReport>;
}

/// Cross-entropy on the probability assigned to a gold label.
pub fn label_loss(prob: f64) -> f64 {
    -math::clamp_prob(prob).ln()
}

/// Loss that pushes probability mass away from a label: -log(1 - P(label)).
/// Counterfactual examples trained in `cf` mode pay this on their origin
/// label.
pub fn counterfactual_loss(prob: f64) -> f64 {
    -(1.0 - math::clamp_prob(prob)).ln()
}

/// Argmax label under a backend; ties break toward the lower label id.
pub fn predict_label(backend: &dyn ClassifierBackend, text: &TokenizedText) -> Result<usize> {
    Ok(math::argmax(&backend.predict_proba(text)?))
}

/// Accuracy of a backend over a tokenized dataset.
pub fn accuracy(backend: &dyn ClassifierBackend, data: &TokenizedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData(
            "cannot compute accuracy on an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    for item in data.iter() {
        if predict_label(backend, &item.text)? == item.label.id() {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Train a classifier on a labeled dataset, selecting the checkpoint with the
/// best dev accuracy.
pub fn train_classifier(
    train: &TokenizedDataset,
    dev: &TokenizedDataset,
    config: &TrainConfig,
    backend: &mut dyn ClassifierBackend,
) -> Result<TrainingReport> {
    if train.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::InsufficientData(
            "dev set is empty; checkpoint selection needs one".into(),
        ));
    }
    let items: Vec<TrainItem> = train
        .iter()
        .map(|item| TrainItem {
            text: item.text.clone(),
            target: TrainTarget::Is(item.label.id()),
        })
        .collect();
    backend.fit(&items, dev, config)
}

/// The training objective for infilling generators: likelihood of the true
/// spans under the gold control label plus `alpha` times the unlikelihood of
/// those spans under every flipped control label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfillObjective {
    pub alpha: f64,
}

impl InfillObjective {
    pub fn mle_only() -> Self {
        InfillObjective { alpha: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha {} must be finite and non-negative",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Label-conditioned infilling backend. `step_distribution` returns the next
/// token distribution given the control label, the corrupted input, and the
/// decoded prefix (which always starts at the first slot marker).
pub trait GeneratorBackend: Send + Sync {
    fn vocab(&self) -> &GenVocab;

    fn label_count(&self) -> usize;

    fn step_distribution(
        &self,
        control_label: usize,
        corrupted: &[usize],
        prefix: &[usize],
    ) -> Result<Vec<f64>>;

    fn fit(
        &mut self,
        train: &[MaskedTemplate],
        dev: &[MaskedTemplate],
        objective: &InfillObjective,
        config: &TrainConfig,
    ) -> Result<TrainingReport>;
}

/// Train a generator on masked templates, selecting the checkpoint with the
/// lowest dev perplexity.
pub fn train_generator(
    train: &[MaskedTemplate],
    dev: &[MaskedTemplate],
    objective: &InfillObjective,
    config: &TrainConfig,
    backend: &mut dyn GeneratorBackend,
) -> Result<TrainingReport> {
    if train.is_empty() {
        return Err(Error::InsufficientData(
            "no masked templates to train on".into(),
        ));
    }
    if dev.is_empty() {
        return Err(Error::InsufficientData(
            "no dev templates; perplexity selection needs them".into(),
        ));
    }
    objective.validate()?;
    backend.fit(train, dev, objective, config)
}

/// Token inventory with id lookup. Id 0 is always the unknown token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocab {
    /// Build from special tokens followed by corpus tokens, first occurrence
    /// wins. `<unk>` is always present at id 0.
    pub fn build<'a>(
        specials: impl IntoIterator<Item = &'a str>,
        tokens: impl IntoIterator<Item = &'a str>,
    ) -> Vocab {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        vocab.intern(UNK_TOKEN);
        for token in specials {
            vocab.intern(token);
        }
        for token in tokens {
            vocab.intern(token);
        }
        vocab
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        0
    }
}

impl From<Vocab> for Vec<String> {
    fn from(vocab: Vocab) -> Self {
        vocab.tokens
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> std::result::Result<Self, String> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(format!("vocabulary must start with {UNK_TOKEN}"));
        }
        let mut index = HashMap::new();
        for (id, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), id).is_some() {
                return Err(format!("duplicate vocabulary token '{token}'"));
            }
        }
        Ok(Vocab { tokens, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_interns_in_order_with_unk_first() {
        let vocab = Vocab::build(["<mask>"], ["b", "a", "b"].into_iter());
        assert_eq!(vocab.token(0), UNK_TOKEN);
        assert_eq!(vocab.token(1), "<mask>");
        assert_eq!(vocab.id("b"), 2);
        assert_eq!(vocab.id("a"), 3);
        assert_eq!(vocab.len(), 4);
        assert_eq!(vocab.id("zzz"), vocab.unk_id());
        assert_eq!(vocab.lookup("zzz"), None);
    }

    #[test]
    fn vocab_survives_serde_round_trip() {
        let vocab = Vocab::build([], ["x", "y"].into_iter());
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.id("y"), vocab.id("y"));
    }

    #[test]
    fn train_config_validation_catches_nonsense() {
        let mut config = TrainConfig::classifier_default(1);
        config.learning_rate = -1.0;
        assert!(config.validate().is_err());
        let mut config = TrainConfig::classifier_default(1);
        config.batch_size = 0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn objective_rejects_negative_alpha() {
        assert!(InfillObjective { alpha: -0.1 }.validate().is_err());
        assert!(InfillObjective { alpha: 0.3 }.validate().is_ok());
    }

    #[test]
    fn per_label_losses_match_hand_values() {
        assert!((label_loss(0.5) - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((counterfactual_loss(0.5) - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((counterfactual_loss(0.75) - 4.0f64.ln()).abs() < 1e-6);
        assert!(counterfactual_loss(1.0).is_finite());
        assert!(label_loss(0.0).is_finite());
    }
}
