//! Reference classifier: trainable subtoken embeddings feed a per-token
//! hidden ReLU layer, token features are attention-pooled per segment,
//! segment vectors are concatenated, and a linear head produces label
//! logits. Attention pooling matters beyond accuracy: a token the model
//! leans on receives a large attention weight, which scales its embedding
//! gradient, so gradient-norm saliency ranks decision-driving tokens first.
//! Mean pooling lacks that property at this scale.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedDataset, TokenizedText};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::modelkit::math::{argmax, clamp_prob, dot, softmax, Mat};
use crate::modelkit::{
    ClassifierBackend, EpochRecord, SelectionMetric, TrainConfig, TrainItem, TrainTarget,
    TrainingReport, Vocab,
};

/// Layer widths. The defaults are deliberately small: the whole model stays
/// under 10^5 parameters at typical vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierDims {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ClassifierDims {
    fn default() -> Self {
        ClassifierDims {
            embedding_dim: 16,
            hidden_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceClassifier {
    vocab: Vocab,
    label_count: usize,
    segment_count: usize,
    dims: ClassifierDims,
    emb: Mat,          // V x E
    w1: Mat,           // H x E
    b1: Vec<f64>,      // H
    attn_u: Vec<f64>,  // H, attention scorer
    w2: Mat,           // L x (H * segments)
    b2: Vec<f64>,      // L
    train_config: Option<TrainConfig>,
}

/// Everything one forward pass produces that training or gradient extraction
/// needs again.
struct Forward {
    token_ids: Vec<usize>,
    seg_of: Vec<usize>,
    /// Post-ReLU hidden vector per subtoken.
    hidden: Vec<Vec<f64>>,
    /// Attention weight per subtoken; weights within a segment sum to 1.
    attn: Vec<f64>,
    feats: Vec<f64>,
    logits: Vec<f64>,
}

struct GradBuf {
    emb: Mat,
    w1: Mat,
    b1: Vec<f64>,
    attn_u: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
}

impl GradBuf {
    fn zeros_like(model: &ReferenceClassifier) -> Self {
        GradBuf {
            emb: Mat::zeros(model.emb.rows, model.emb.cols),
            w1: Mat::zeros(model.w1.rows, model.w1.cols),
            b1: vec![0.0; model.b1.len()],
            attn_u: vec![0.0; model.attn_u.len()],
            w2: Mat::zeros(model.w2.rows, model.w2.cols),
            b2: vec![0.0; model.b2.len()],
        }
    }

    fn reset(&mut self) {
        self.emb.fill(0.0);
        self.w1.fill(0.0);
        self.b1.iter_mut().for_each(|v| *v = 0.0);
        self.attn_u.iter_mut().for_each(|v| *v = 0.0);
        self.w2.fill(0.0);
        self.b2.iter_mut().for_each(|v| *v = 0.0);
    }
}

type Snapshot = (Mat, Mat, Vec<f64>, Vec<f64>, Mat, Vec<f64>);

impl ReferenceClassifier {
    pub fn new(
        vocab: Vocab,
        label_count: usize,
        segment_count: usize,
        dims: ClassifierDims,
        seed: u64,
    ) -> Result<Self> {
        if label_count < 2 {
            return Err(Error::InvalidConfig(
                "classifier needs at least two labels".into(),
            ));
        }
        if !(1..=2).contains(&segment_count) {
            return Err(Error::InvalidConfig(
                "segment_count must be 1 or 2".into(),
            ));
        }
        if dims.embedding_dim == 0 || dims.hidden_dim == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["classifier-init"]));
        let emb = Mat::uniform(vocab.len(), dims.embedding_dim, 0.1, &mut rng);
        let w1 = Mat::glorot(dims.hidden_dim, dims.embedding_dim, &mut rng);
        let w2 = Mat::glorot(label_count, dims.hidden_dim * segment_count, &mut rng);
        Ok(ReferenceClassifier {
            b1: vec![0.0; dims.hidden_dim],
            // Zero scorer means pooling starts uniform and sharpens only
            // where training pushes it.
            attn_u: vec![0.0; dims.hidden_dim],
            b2: vec![0.0; label_count],
            vocab,
            label_count,
            segment_count,
            dims,
            emb,
            w1,
            w2,
            train_config: None,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn dims(&self) -> ClassifierDims {
        self.dims
    }

    pub fn parameter_count(&self) -> usize {
        self.emb.len()
            + self.w1.len()
            + self.b1.len()
            + self.attn_u.len()
            + self.w2.len()
            + self.b2.len()
    }

    /// Fails unless the checkpoint was built over exactly this vocabulary.
    pub fn ensure_vocab(&self, expected: &Vocab) -> Result<()> {
        if &self.vocab != expected {
            return Err(Error::CheckpointMismatch(format!(
                "classifier vocabulary has {} tokens, expected {}; retrain or regenerate the checkpoint",
                self.vocab.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let envelope = Checkpoint {
            format: FORMAT_TAG.to_string(),
            model: self.clone(),
        };
        let json = serde_json::to_string(&envelope)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let envelope: Checkpoint = serde_json::from_str(&raw)?;
        if envelope.format != FORMAT_TAG {
            return Err(Error::CheckpointMismatch(format!(
                "expected format '{FORMAT_TAG}', found '{}'",
                envelope.format
            )));
        }
        Ok(envelope.model)
    }

    pub(crate) fn perturb_embedding(&mut self, token_id: usize, dim: usize, delta: f64) {
        self.emb.row_mut(token_id)[dim] += delta;
    }

    pub(crate) fn token_id(&self, token: &str) -> usize {
        self.vocab.id(token)
    }

    fn forward(&self, text: &TokenizedText) -> Result<Forward> {
        if text.n() == 0 {
            return Err(Error::InvalidInput("cannot classify an empty text".into()));
        }
        if text.segment_count != self.segment_count {
            return Err(Error::InvalidInput(format!(
                "text has {} segment(s) but the classifier expects {}",
                text.segment_count, self.segment_count
            )));
        }
        let n = text.n();
        let mut token_ids = Vec::with_capacity(n);
        let mut seg_of = Vec::with_capacity(n);
        for (word, &(start, end)) in text.word_subtokens.iter().enumerate() {
            for sub in start..end {
                token_ids.push(self.vocab.id(&text.subtokens[sub]));
                seg_of.push(text.word_segment[word]);
            }
        }
        let h_dim = self.dims.hidden_dim;
        let mut hidden = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            let e = self.emb.row(token_ids[i]);
            let mut a = self.w1.matvec(e);
            for (v, b) in a.iter_mut().zip(&self.b1) {
                *v += b;
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            scores.push(dot(&self.attn_u, &a));
            hidden.push(a);
        }

        // Softmax over each segment's attention scores, then pool that
        // segment's hidden vectors under the resulting weights.
        let mut attn = vec![0.0; n];
        let mut feats = vec![0.0; h_dim * self.segment_count];
        for seg in 0..self.segment_count {
            let members: Vec<usize> = (0..n).filter(|&i| seg_of[i] == seg).collect();
            if members.is_empty() {
                continue;
            }
            let max = members
                .iter()
                .map(|&i| scores[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in &members {
                attn[i] = (scores[i] - max).exp();
                total += attn[i];
            }
            for &i in &members {
                attn[i] /= total;
                for (f, v) in feats[seg * h_dim..(seg + 1) * h_dim]
                    .iter_mut()
                    .zip(&hidden[i])
                {
                    *f += attn[i] * v;
                }
            }
        }

        let mut logits = self.w2.matvec(&feats);
        for (l, b) in logits.iter_mut().zip(&self.b2) {
            *l += b;
        }
        Ok(Forward {
            token_ids,
            seg_of,
            hidden,
            attn,
            feats,
            logits,
        })
    }

    /// For every subtoken, the gradient of `pooled features · dfeats` with
    /// respect to that subtoken's hidden vector, plus the gradient of the
    /// token's attention score. The score term accounts for how moving one
    /// token's score shifts pooling weight away from its neighbours.
    fn pooled_hidden_gradients(&self, fwd: &Forward, dfeats: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let h_dim = self.dims.hidden_dim;
        let n = fwd.token_ids.len();
        let mut contrib = vec![0.0; n];
        let mut seg_mean = vec![0.0; self.segment_count];
        for i in 0..n {
            let seg = fwd.seg_of[i];
            let block = &dfeats[seg * h_dim..(seg + 1) * h_dim];
            contrib[i] = dot(block, &fwd.hidden[i]);
            seg_mean[seg] += fwd.attn[i] * contrib[i];
        }
        let mut dhidden = Vec::with_capacity(n);
        let mut dscores = Vec::with_capacity(n);
        for i in 0..n {
            let seg = fwd.seg_of[i];
            let block = &dfeats[seg * h_dim..(seg + 1) * h_dim];
            let dscore = fwd.attn[i] * (contrib[i] - seg_mean[seg]);
            let dh: Vec<f64> = block
                .iter()
                .zip(&self.attn_u)
                .map(|(&b, &u)| fwd.attn[i] * b + dscore * u)
                .collect();
            dhidden.push(dh);
            dscores.push(dscore);
        }
        (dhidden, dscores)
    }

    fn dev_accuracy(&self, dev: &TokenizedDataset) -> Result<f64> {
        let mut correct = 0usize;
        for item in dev.iter() {
            let proba = softmax(&self.forward(&item.text)?.logits);
            if argmax(&proba) == item.label.id() {
                correct += 1;
            }
        }
        Ok(correct as f64 / dev.len() as f64)
    }

    fn snapshot(&self) -> Snapshot {
        (
            self.emb.clone(),
            self.w1.clone(),
            self.b1.clone(),
            self.attn_u.clone(),
            self.w2.clone(),
            self.b2.clone(),
        )
    }

    fn restore(&mut self, snap: Snapshot) {
        self.emb = snap.0;
        self.w1 = snap.1;
        self.b1 = snap.2;
        self.attn_u = snap.3;
        self.w2 = snap.4;
        self.b2 = snap.5;
    }

    /// Loss and logit gradient for one item. `Is` is plain cross-entropy;
    /// `IsNot` descends -log(1 - P(label)), with the gradient ratio capped so
    /// a saturated probability cannot blow up a batch.
    fn loss_and_dlogits(&self, target: TrainTarget, proba: &[f64]) -> (f64, Vec<f64>) {
        match target {
            TrainTarget::Is(label) => {
                let loss = super::label_loss(proba[label]);
                let mut dlogits = proba.to_vec();
                dlogits[label] -= 1.0;
                (loss, dlogits)
            }
            TrainTarget::IsNot(label) => {
                let q = clamp_prob(proba[label]);
                let loss = super::counterfactual_loss(proba[label]);
                let ratio = (q / (1.0 - q)).min(1e3);
                let mut dlogits: Vec<f64> = proba.iter().map(|&p| -ratio * p).collect();
                dlogits[label] += ratio;
                (loss, dlogits)
            }
        }
    }

    fn backward(&self, fwd: &Forward, dlogits: &[f64], grads: &mut GradBuf) {
        grads.w2.add_outer(dlogits, &fwd.feats, 1.0);
        for (g, d) in grads.b2.iter_mut().zip(dlogits) {
            *g += d;
        }
        let dfeats = self.w2.t_matvec(dlogits);
        let (dhidden, dscores) = self.pooled_hidden_gradients(&fwd, &dfeats);
        for i in 0..fwd.token_ids.len() {
            for (g, h) in grads.attn_u.iter_mut().zip(&fwd.hidden[i]) {
                *g += dscores[i] * h;
            }
            // dh passes the ReLU gate: zero wherever the unit was inactive.
            let dh: Vec<f64> = fwd.hidden[i]
                .iter()
                .zip(&dhidden[i])
                .map(|(&h, &d)| if h > 0.0 { d } else { 0.0 })
                .collect();
            let e = self.emb.row(fwd.token_ids[i]);
            grads.w1.add_outer(&dh, e, 1.0);
            for (g, d) in grads.b1.iter_mut().zip(&dh) {
                *g += d;
            }
            let de = self.w1.t_matvec(&dh);
            for (g, d) in grads.emb.row_mut(fwd.token_ids[i]).iter_mut().zip(&de) {
                *g += d;
            }
        }
    }

    fn apply(&mut self, grads: &GradBuf, lr: f64, batch_len: usize) {
        let step = lr / batch_len as f64;
        for (p, g) in self.emb.data.iter_mut().zip(&grads.emb.data) {
            *p -= step * g;
        }
        for (p, g) in self.w1.data.iter_mut().zip(&grads.w1.data) {
            *p -= step * g;
        }
        for (p, g) in self.b1.iter_mut().zip(&grads.b1) {
            *p -= step * g;
        }
        for (p, g) in self.attn_u.iter_mut().zip(&grads.attn_u) {
            *p -= step * g;
        }
        for (p, g) in self.w2.data.iter_mut().zip(&grads.w2.data) {
            *p -= step * g;
        }
        for (p, g) in self.b2.iter_mut().zip(&grads.b2) {
            *p -= step * g;
        }
    }
}

const FORMAT_TAG: &str = "counterfact-classifier/v2";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: ReferenceClassifier,
}

impl ClassifierBackend for ReferenceClassifier {
    fn label_count(&self) -> usize {
        self.label_count
    }

    fn embedding_dim(&self) -> usize {
        self.dims.embedding_dim
    }

    fn predict_proba(&self, text: &TokenizedText) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(text)?.logits))
    }

    fn logit(&self, label: usize, text: &TokenizedText) -> Result<f64> {
        if label >= self.label_count {
            return Err(Error::InvalidInput(format!(
                "label id {label} out of range (have {})",
                self.label_count
            )));
        }
        Ok(self.forward(text)?.logits[label])
    }

    fn embedding_gradients(&self, label: usize, text: &TokenizedText) -> Result<Vec<Vec<f64>>> {
        if label >= self.label_count {
            return Err(Error::InvalidInput(format!(
                "label id {label} out of range (have {})",
                self.label_count
            )));
        }
        let fwd = self.forward(text)?;
        let (dhidden, _) = self.pooled_hidden_gradients(&fwd, self.w2.row(label));
        let mut out = Vec::with_capacity(fwd.token_ids.len());
        for (i, dh) in dhidden.iter().enumerate() {
            let gated: Vec<f64> = fwd.hidden[i]
                .iter()
                .zip(dh)
                .map(|(&h, &d)| if h > 0.0 { d } else { 0.0 })
                .collect();
            out.push(self.w1.t_matvec(&gated));
        }
        Ok(out)
    }

    fn fit(
        &mut self,
        train: &[TrainItem],
        dev: &TokenizedDataset,
        config: &TrainConfig,
    ) -> Result<TrainingReport> {
        config.validate()?;
        if config.selection != SelectionMetric::DevAccuracy {
            return Err(Error::InvalidConfig(
                "classifier checkpoints are selected by dev accuracy".into(),
            ));
        }
        if train.is_empty() {
            return Err(Error::InsufficientData("training set is empty".into()));
        }
        for item in train {
            if item.target.label() >= self.label_count {
                return Err(Error::InvalidInput(format!(
                    "training label id {} out of range (have {})",
                    item.target.label(),
                    self.label_count
                )));
            }
        }

        let mut report = TrainingReport::untrained(SelectionMetric::DevAccuracy);
        if config.max_epochs == 0 {
            self.train_config = Some(config.clone());
            return Ok(report);
        }

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut grads = GradBuf::zeros_like(self);
        let mut best: Option<(f64, usize, Snapshot)> = None;
        let mut evals_since_best = 0usize;

        for epoch in 1..=config.max_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                &["classifier-epoch", &epoch.to_string()],
            ));
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);

            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                grads.reset();
                for &idx in batch {
                    let item = &train[idx];
                    let fwd = self.forward(&item.text)?;
                    let proba = softmax(&fwd.logits);
                    let (loss, dlogits) = self.loss_and_dlogits(item.target, &proba);
                    epoch_loss += loss;
                    self.backward(&fwd, &dlogits, &mut grads);
                }
                self.apply(&grads, config.learning_rate, batch.len());
            }
            let train_loss = epoch_loss / train.len() as f64;
            if !train_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    message: format!("mean training loss is {train_loss}"),
                });
            }

            let mut dev_metric = None;
            if epoch % config.eval_every == 0 || epoch == config.max_epochs {
                let acc = self.dev_accuracy(dev)?;
                dev_metric = Some(acc);
                let improved = best.as_ref().map_or(true, |(b, _, _)| acc > *b);
                if improved {
                    best = Some((acc, epoch, self.snapshot()));
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                }
            }
            report.history.push(EpochRecord {
                epoch,
                train_loss,
                dev_metric,
            });
            report.epochs_run = epoch;
            if config.patience > 0 && evals_since_best >= config.patience {
                break;
            }
        }

        if let Some((metric, epoch, snap)) = best {
            self.restore(snap);
            report.best_epoch = Some(epoch);
            report.best_metric = Some(metric);
        }
        self.train_config = Some(config.clone());
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        tokenize_dataset, SyntheticTask, TokenizedExample, Tokenizer, WhitespaceTokenizer,
        MASK_TOKEN,
    };
    use crate::modelkit::diagnostics::fd_embedding_gradients;
    use crate::modelkit::{accuracy, predict_label, train_classifier};

    fn tiny_vocab() -> Vocab {
        Vocab::build(
            [MASK_TOKEN],
            ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"].into_iter(),
        )
    }

    fn text(words: &str) -> TokenizedText {
        WhitespaceTokenizer
            .tokenize_align(&[words.to_string()])
            .unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let clf = ReferenceClassifier::new(
            tiny_vocab(),
            3,
            1,
            ClassifierDims::default(),
            11,
        )
        .unwrap();
        let proba = clf.predict_proba(&text("alpha beta gamma")).unwrap();
        assert_eq!(proba.len(), 3);
        assert!((proba.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(proba.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn argmax_is_invariant_under_monotone_logit_rescaling() {
        let clf =
            ReferenceClassifier::new(tiny_vocab(), 4, 1, ClassifierDims::default(), 3).unwrap();
        let sample = text("beta delta zeta alpha");
        let logits: Vec<f64> = (0..4).map(|l| clf.logit(l, &sample).unwrap()).collect();
        let predicted = predict_label(&clf, &sample).unwrap();
        for transform in [|x: f64| 3.0 * x + 1.0, |x: f64| x.exp()] {
            let rescaled: Vec<f64> = logits.iter().map(|&l| transform(l)).collect();
            assert_eq!(argmax(&rescaled), predicted);
        }
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let clf =
            ReferenceClassifier::new(tiny_vocab(), 2, 1, ClassifierDims::default(), 29).unwrap();
        // Distinct in-vocab tokens so each position owns its embedding row.
        let sample = text("alpha gamma epsilon beta");
        for label in 0..2 {
            let analytic = clf.embedding_gradients(label, &sample).unwrap();
            let numeric = fd_embedding_gradients(&clf, label, &sample, 1e-4).unwrap();
            for (a_row, n_row) in analytic.iter().zip(&numeric) {
                for (&a, &n) in a_row.iter().zip(n_row) {
                    let scale = a.abs().max(n.abs()).max(1e-8);
                    assert!(
                        (a - n).abs() / scale < 1e-3,
                        "analytic {a} vs numeric {n}"
                    );
                }
            }
        }
    }

    #[test]
    fn pair_texts_pool_per_segment() {
        let clf =
            ReferenceClassifier::new(tiny_vocab(), 2, 2, ClassifierDims::default(), 5).unwrap();
        let pair = WhitespaceTokenizer
            .tokenize_align(&["alpha beta".to_string(), "gamma".to_string()])
            .unwrap();
        assert!(clf.predict_proba(&pair).is_ok());
        let single = text("alpha beta gamma");
        assert!(clf.predict_proba(&single).is_err());
    }

    fn synthetic_tokenized(seed: u64) -> (TokenizedDataset, TokenizedDataset, Vocab) {
        let task = SyntheticTask::binary(seed);
        let corpus = task.generate().unwrap();
        let tok = WhitespaceTokenizer;
        let train = tokenize_dataset(&corpus.train, &tok).unwrap();
        let dev = tokenize_dataset(&corpus.dev, &tok).unwrap();
        let vocab = Vocab::build(
            [MASK_TOKEN],
            train
                .iter()
                .flat_map(|item| item.text.subtokens.iter().map(String::as_str)),
        );
        (train, dev, vocab)
    }

    #[test]
    fn separates_the_synthetic_task() {
        let (train, dev, vocab) = synthetic_tokenized(17);
        let mut clf =
            ReferenceClassifier::new(vocab, 2, 1, ClassifierDims::default(), 17).unwrap();
        let config = TrainConfig::classifier_default(17);
        let report = train_classifier(&train, &dev, &config, &mut clf).unwrap();
        let acc = report.best_metric.unwrap();
        assert!(acc >= 0.95, "dev accuracy {acc} below 0.95");
        assert!(clf.parameter_count() <= 100_000);
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let (train, dev, vocab) = synthetic_tokenized(23);
        let config = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::classifier_default(23)
        };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut clf =
                ReferenceClassifier::new(vocab.clone(), 2, 1, ClassifierDims::default(), 23)
                    .unwrap();
            let report = train_classifier(&train, &dev, &config, &mut clf).unwrap();
            runs.push((report, clf));
        }
        assert_eq!(runs[0].0, runs[1].0, "training reports differ across reruns");
        let probe = &train.items[0].text;
        assert_eq!(
            runs[0].1.predict_proba(probe).unwrap(),
            runs[1].1.predict_proba(probe).unwrap()
        );
    }

    #[test]
    fn zero_epochs_returns_untrained_model_and_empty_report() {
        let (train, dev, vocab) = synthetic_tokenized(31);
        let mut clf =
            ReferenceClassifier::new(vocab.clone(), 2, 1, ClassifierDims::default(), 31).unwrap();
        let before = clf.predict_proba(&train.items[0].text).unwrap();
        let config = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::classifier_default(31)
        };
        let report = train_classifier(&train, &dev, &config, &mut clf).unwrap();
        assert_eq!(report.epochs_run, 0);
        assert!(report.history.is_empty());
        assert_eq!(report.best_epoch, None);
        assert_eq!(clf.predict_proba(&train.items[0].text).unwrap(), before);
    }

    #[test]
    fn unlikelihood_items_push_probability_away() {
        let vocab = tiny_vocab();
        let labels = crate::corpus::LabelSet::new(["a", "b"]).unwrap();
        let sample = text("alpha beta");
        let mut clf =
            ReferenceClassifier::new(vocab, 2, 1, ClassifierDims::default(), 7).unwrap();
        let before = clf.predict_proba(&sample).unwrap()[0];
        let items = vec![TrainItem {
            text: sample.clone(),
            target: TrainTarget::IsNot(0),
        }];
        let dev = TokenizedDataset {
            items: vec![TokenizedExample {
                id: "d".into(),
                text: sample.clone(),
                label: labels.get(1).unwrap().clone(),
            }],
        };
        let config = TrainConfig {
            max_epochs: 20,
            learning_rate: 0.2,
            ..TrainConfig::classifier_default(7)
        };
        clf.fit(&items, &dev, &config).unwrap();
        let after = clf.predict_proba(&sample).unwrap()[0];
        assert!(after < before, "P(a) went {before} -> {after}");
    }

    #[test]
    fn out_of_vocabulary_words_fall_back_to_unk() {
        let clf =
            ReferenceClassifier::new(tiny_vocab(), 2, 1, ClassifierDims::default(), 2).unwrap();
        assert!(clf.predict_proba(&text("nonsense words here")).is_ok());
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_foreign_vocab() {
        let (train, dev, vocab) = synthetic_tokenized(41);
        let mut clf =
            ReferenceClassifier::new(vocab.clone(), 2, 1, ClassifierDims::default(), 41).unwrap();
        let config = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::classifier_default(41)
        };
        train_classifier(&train, &dev, &config, &mut clf).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        clf.save(&path).unwrap();
        let loaded = ReferenceClassifier::load(&path).unwrap();
        loaded.ensure_vocab(&vocab).unwrap();
        let probe = &train.items[0].text;
        assert_eq!(
            loaded.predict_proba(probe).unwrap(),
            clf.predict_proba(probe).unwrap()
        );
        assert_eq!(accuracy(&loaded, &dev).unwrap(), accuracy(&clf, &dev).unwrap());

        let other = Vocab::build([], ["different", "tokens"].into_iter());
        assert!(matches!(
            loaded.ensure_vocab(&other),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
