//! Reference infilling generator. Each decoding step sees five things: the
//! mean embedding of the corrupted input, the previous target token, the
//! control label, how deep into the current span it is, and which slot it is
//! filling. A single hidden layer mixes them and a softmax over the
//! generation vocabulary scores the next token.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::infill::{flipped_labels, slot_marker, CompiledTemplate, MaskedTemplate};
use crate::modelkit::math::{clamp_prob, softmax, AdamState, Mat};
use crate::modelkit::{
    EpochRecord, GeneratorBackend, InfillObjective, SelectionMetric, TrainConfig, TrainingReport,
    UNK_TOKEN,
};

// ---------------------------------------------------------------------------
// Generation vocabulary
// ---------------------------------------------------------------------------

/// Token inventory for generation: id 0 is the unknown token, ids 1 through
/// `max_slots + 1` are the slot markers, words follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GenVocabRepr", into = "GenVocabRepr")]
pub struct GenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_slots: usize,
}

#[derive(Serialize, Deserialize)]
struct GenVocabRepr {
    max_slots: usize,
    tokens: Vec<String>,
}

impl GenVocab {
    /// `max_slots` is the largest slot count a template may have; markers 0
    /// through `max_slots` inclusive are reserved so the final closing marker
    /// always exists. Repeated words keep their first id.
    pub fn build<'a>(max_slots: usize, words: impl IntoIterator<Item = &'a str>) -> GenVocab {
        let mut vocab = GenVocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            max_slots,
        };
        vocab.intern(UNK_TOKEN);
        for k in 0..=max_slots {
            vocab.intern(&slot_marker(k));
        }
        for word in words {
            vocab.intern(word);
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

    pub fn max_slots(&self) -> usize {
        self.max_slots
    }

    pub fn marker_id(&self, k: usize) -> Result<usize> {
        if k > self.max_slots {
            return Err(Error::InvalidInput(format!(
                "slot marker {k} exceeds the vocabulary's limit of {}",
                self.max_slots
            )));
        }
        Ok(1 + k)
    }

    pub fn is_marker(&self, id: usize) -> bool {
        (1..=1 + self.max_slots).contains(&id)
    }
}

impl From<GenVocab> for GenVocabRepr {
    fn from(vocab: GenVocab) -> Self {
        GenVocabRepr {
            max_slots: vocab.max_slots,
            tokens: vocab.tokens,
        }
    }
}

impl TryFrom<GenVocabRepr> for GenVocab {
    type Error = String;

    fn try_from(repr: GenVocabRepr) -> std::result::Result<Self, String> {
        if repr.tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(format!("generation vocabulary must start with {UNK_TOKEN}"));
        }
        for k in 0..=repr.max_slots {
            if repr.tokens.get(1 + k).map(String::as_str) != Some(slot_marker(k).as_str()) {
                return Err(format!("marker {k} missing from its reserved position"));
            }
        }
        let mut index = HashMap::new();
        for (id, token) in repr.tokens.iter().enumerate() {
            if index.insert(token.clone(), id).is_some() {
                return Err(format!("duplicate vocabulary token '{token}'"));
            }
        }
        Ok(GenVocab {
            tokens: repr.tokens,
            index,
            max_slots: repr.max_slots,
        })
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorDims {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub position_dim: usize,
    pub slot_dim: usize,
    /// Span positions at or past this index share the last position row.
    pub max_position: usize,
}

impl Default for GeneratorDims {
    fn default() -> Self {
        GeneratorDims {
            embedding_dim: 24,
            hidden_dim: 48,
            position_dim: 8,
            slot_dim: 8,
            max_position: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenParams {
    emb: Mat,
    ctl: Mat,
    pos_emb: Mat,
    slot_emb: Mat,
    w_enc: Mat,
    w_prev: Mat,
    w_ctl: Mat,
    w_pos: Mat,
    w_slot: Mat,
    b_h: Vec<f64>,
    w_out: Mat,
    b_out: Vec<f64>,
}

impl GenParams {
    fn zeros_like(&self) -> GenParams {
        GenParams {
            emb: Mat::zeros(self.emb.rows, self.emb.cols),
            ctl: Mat::zeros(self.ctl.rows, self.ctl.cols),
            pos_emb: Mat::zeros(self.pos_emb.rows, self.pos_emb.cols),
            slot_emb: Mat::zeros(self.slot_emb.rows, self.slot_emb.cols),
            w_enc: Mat::zeros(self.w_enc.rows, self.w_enc.cols),
            w_prev: Mat::zeros(self.w_prev.rows, self.w_prev.cols),
            w_ctl: Mat::zeros(self.w_ctl.rows, self.w_ctl.cols),
            w_pos: Mat::zeros(self.w_pos.rows, self.w_pos.cols),
            w_slot: Mat::zeros(self.w_slot.rows, self.w_slot.cols),
            b_h: vec![0.0; self.b_h.len()],
            w_out: Mat::zeros(self.w_out.rows, self.w_out.cols),
            b_out: vec![0.0; self.b_out.len()],
        }
    }

    fn tensors(&self) -> [&[f64]; 12] {
        [
            &self.emb.data,
            &self.ctl.data,
            &self.pos_emb.data,
            &self.slot_emb.data,
            &self.w_enc.data,
            &self.w_prev.data,
            &self.w_ctl.data,
            &self.w_pos.data,
            &self.w_slot.data,
            &self.b_h,
            &self.w_out.data,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            &mut self.emb.data,
            &mut self.ctl.data,
            &mut self.pos_emb.data,
            &mut self.slot_emb.data,
            &mut self.w_enc.data,
            &mut self.w_prev.data,
            &mut self.w_ctl.data,
            &mut self.w_pos.data,
            &mut self.w_slot.data,
            &mut self.b_h,
            &mut self.w_out.data,
            &mut self.b_out,
        ]
    }

    fn scale(&mut self, factor: f64) {
        for tensor in self.tensors_mut() {
            for v in tensor.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn zero(&mut self) {
        for tensor in self.tensors_mut() {
            for v in tensor.iter_mut() {
                *v = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceGenerator {
    vocab: GenVocab,
    label_count: usize,
    dims: GeneratorDims,
    params: GenParams,
    train_config: Option<TrainConfig>,
}

/// Everything a backward step needs from the forward pass.
struct StepCache {
    control: usize,
    prev: usize,
    pos_row: usize,
    slot_row: usize,
    hidden: Vec<f64>,
}

impl ReferenceGenerator {
    pub fn new(
        vocab: GenVocab,
        label_count: usize,
        dims: GeneratorDims,
        seed: u64,
    ) -> Result<Self> {
        if label_count < 2 {
            return Err(Error::InvalidConfig(
                "generator needs at least two labels".into(),
            ));
        }
        if dims.embedding_dim == 0
            || dims.hidden_dim == 0
            || dims.position_dim == 0
            || dims.slot_dim == 0
            || dims.max_position == 0
        {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["generator-init"]));
        let v = vocab.len();
        let e = dims.embedding_dim;
        let h = dims.hidden_dim;
        let slot_rows = vocab.max_slots().max(1);
        let params = GenParams {
            emb: Mat::uniform(v, e, 0.1, &mut rng),
            ctl: Mat::uniform(label_count, e, 0.1, &mut rng),
            pos_emb: Mat::uniform(dims.max_position, dims.position_dim, 0.1, &mut rng),
            slot_emb: Mat::uniform(slot_rows, dims.slot_dim, 0.1, &mut rng),
            w_enc: Mat::glorot(h, e, &mut rng),
            w_prev: Mat::glorot(h, e, &mut rng),
            w_ctl: Mat::glorot(h, e, &mut rng),
            w_pos: Mat::glorot(h, dims.position_dim, &mut rng),
            w_slot: Mat::glorot(h, dims.slot_dim, &mut rng),
            b_h: vec![0.0; h],
            w_out: Mat::glorot(v, h, &mut rng),
            b_out: vec![0.0; v],
        };
        Ok(ReferenceGenerator {
            vocab,
            label_count,
            dims,
            params,
            train_config: None,
        })
    }

    pub fn dims(&self) -> GeneratorDims {
        self.dims
    }

    pub fn parameter_count(&self) -> usize {
        self.params.tensors().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn parameter_mut(&mut self, mut index: usize) -> &mut f64 {
        for tensor in self.params.tensors_mut() {
            if index < tensor.len() {
                return &mut tensor[index];
            }
            index -= tensor.len();
        }
        panic!("parameter index out of range");
    }

    pub fn ensure_vocab(&self, expected: &GenVocab) -> Result<()> {
        if &self.vocab != expected {
            return Err(Error::CheckpointMismatch(format!(
                "generator vocabulary has {} tokens, expected {}; retrain or regenerate the checkpoint",
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

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for a vocabulary of {}",
                self.vocab.len()
            )));
        }
        Ok(())
    }

    fn mean_context(&self, corrupted: &[usize]) -> Result<Vec<f64>> {
        if corrupted.is_empty() {
            return Err(Error::InvalidInput("corrupted input is empty".into()));
        }
        self.check_ids(corrupted)?;
        let mut ctx = vec![0.0; self.dims.embedding_dim];
        for &t in corrupted {
            for (c, e) in ctx.iter_mut().zip(self.params.emb.row(t)) {
                *c += e;
            }
        }
        let scale = 1.0 / corrupted.len() as f64;
        ctx.iter_mut().for_each(|c| *c *= scale);
        Ok(ctx)
    }

    /// Previous token, span position row, and slot row implied by a prefix.
    fn prefix_state(&self, prefix: &[usize]) -> Result<(usize, usize, usize)> {
        if prefix.is_empty() {
            return Err(Error::InvalidInput(
                "decode prefix must start with a slot marker".into(),
            ));
        }
        self.check_ids(prefix)?;
        let mut markers = 0usize;
        let mut last_marker = 0usize;
        for (i, &t) in prefix.iter().enumerate() {
            if self.vocab.is_marker(t) {
                markers += 1;
                last_marker = i;
            }
        }
        if markers == 0 {
            return Err(Error::InvalidInput(
                "decode prefix contains no slot marker".into(),
            ));
        }
        let slot_row = (markers - 1).min(self.params.slot_emb.rows - 1);
        let pos_row = (prefix.len() - 1 - last_marker).min(self.params.pos_emb.rows - 1);
        Ok((*prefix.last().unwrap(), pos_row, slot_row))
    }

    fn forward_step(
        &self,
        control: usize,
        ctx: &[f64],
        prev: usize,
        pos_row: usize,
        slot_row: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let mut pre = p.w_enc.matvec(ctx);
        add_matvec(&mut pre, &p.w_prev, p.emb.row(prev));
        add_matvec(&mut pre, &p.w_ctl, p.ctl.row(control));
        add_matvec(&mut pre, &p.w_pos, p.pos_emb.row(pos_row));
        add_matvec(&mut pre, &p.w_slot, p.slot_emb.row(slot_row));
        for (v, b) in pre.iter_mut().zip(&p.b_h) {
            *v += b;
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mut logits = p.w_out.matvec(&pre);
        for (l, b) in logits.iter_mut().zip(&p.b_out) {
            *l += b;
        }
        let probs = softmax(&logits);
        (pre, probs)
    }

    fn backward_step(
        &self,
        cache: &StepCache,
        ctx: &[f64],
        dlogits: &[f64],
        grads: &mut GenParams,
        d_ctx: &mut [f64],
    ) {
        let p = &self.params;
        grads.w_out.add_outer(dlogits, &cache.hidden, 1.0);
        for (g, d) in grads.b_out.iter_mut().zip(dlogits) {
            *g += d;
        }
        let mut dh = p.w_out.t_matvec(dlogits);
        for (d, &h) in dh.iter_mut().zip(&cache.hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        for (g, d) in grads.b_h.iter_mut().zip(&dh) {
            *g += d;
        }
        grads.w_enc.add_outer(&dh, ctx, 1.0);
        for (g, d) in d_ctx.iter_mut().zip(p.w_enc.t_matvec(&dh)) {
            *g += d;
        }
        grads.w_prev.add_outer(&dh, p.emb.row(cache.prev), 1.0);
        for (g, d) in grads
            .emb
            .row_mut(cache.prev)
            .iter_mut()
            .zip(p.w_prev.t_matvec(&dh))
        {
            *g += d;
        }
        grads.w_ctl.add_outer(&dh, p.ctl.row(cache.control), 1.0);
        for (g, d) in grads
            .ctl
            .row_mut(cache.control)
            .iter_mut()
            .zip(p.w_ctl.t_matvec(&dh))
        {
            *g += d;
        }
        grads.w_pos.add_outer(&dh, p.pos_emb.row(cache.pos_row), 1.0);
        for (g, d) in grads
            .pos_emb
            .row_mut(cache.pos_row)
            .iter_mut()
            .zip(p.w_pos.t_matvec(&dh))
        {
            *g += d;
        }
        grads
            .w_slot
            .add_outer(&dh, p.slot_emb.row(cache.slot_row), 1.0);
        for (g, d) in grads
            .slot_emb
            .row_mut(cache.slot_row)
            .iter_mut()
            .zip(p.w_slot.t_matvec(&dh))
        {
            *g += d;
        }
    }

    /// Loss of one compiled template and its gradient, accumulated into
    /// `grads`. The likelihood term walks every target step under the gold
    /// control; the unlikelihood term revisits span steps under each flipped
    /// label.
    fn accumulate_template(
        &self,
        compiled: &CompiledTemplate,
        gold: usize,
        objective: &InfillObjective,
        grads: &mut GenParams,
    ) -> Result<f64> {
        let ctx = self.mean_context(&compiled.corrupted)?;
        let mut d_ctx = vec![0.0; self.dims.embedding_dim];
        let mut prefix = vec![compiled.start];
        let mut loss = 0.0;
        for step in &compiled.steps {
            let (prev, pos_row, slot_row) = self.prefix_state(&prefix)?;
            let (hidden, probs) = self.forward_step(gold, &ctx, prev, pos_row, slot_row);
            loss -= clamp_prob(probs[step.token]).ln();
            let mut dlogits = probs.clone();
            dlogits[step.token] -= 1.0;
            let cache = StepCache {
                control: gold,
                prev,
                pos_row,
                slot_row,
                hidden,
            };
            self.backward_step(&cache, &ctx, &dlogits, grads, &mut d_ctx);

            if objective.alpha > 0.0 && step.span_token {
                for flipped in flipped_labels(self.label_count, gold) {
                    let (hidden, probs) = self.forward_step(flipped, &ctx, prev, pos_row, slot_row);
                    let q = clamp_prob(probs[step.token]);
                    loss += objective.alpha * -(1.0 - q).ln();
                    let factor = objective.alpha * (q / (1.0 - q)).min(1e3);
                    let mut dlogits: Vec<f64> = probs.iter().map(|&p| -factor * p).collect();
                    dlogits[step.token] += factor;
                    let cache = StepCache {
                        control: flipped,
                        prev,
                        pos_row,
                        slot_row,
                        hidden,
                    };
                    self.backward_step(&cache, &ctx, &dlogits, grads, &mut d_ctx);
                }
            }
            prefix.push(step.token);
        }
        let scale = 1.0 / compiled.corrupted.len() as f64;
        for &t in &compiled.corrupted {
            for (g, d) in grads.emb.row_mut(t).iter_mut().zip(&d_ctx) {
                *g += scale * d;
            }
        }
        Ok(loss)
    }

    /// Analytic gradient of the full objective on one template, flattened in
    /// parameter order. Exists so finite differences over the loss can
    /// cross-check the training gradients.
    pub fn loss_gradient(
        &self,
        template: &MaskedTemplate,
        objective: &InfillObjective,
    ) -> Result<Vec<f64>> {
        objective.validate()?;
        let compiled = template.compile(&self.vocab)?;
        let mut grads = self.params.zeros_like();
        self.accumulate_template(&compiled, template.control_label, objective, &mut grads)?;
        Ok(grads.tensors().concat())
    }
}

const FORMAT_TAG: &str = "counterfact-generator/v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: ReferenceGenerator,
}

fn add_matvec(dst: &mut [f64], mat: &Mat, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(mat.matvec(x)) {
        *d += v;
    }
}

impl GeneratorBackend for ReferenceGenerator {
    fn vocab(&self) -> &GenVocab {
        &self.vocab
    }

    fn label_count(&self) -> usize {
        self.label_count
    }

    fn step_distribution(
        &self,
        control_label: usize,
        corrupted: &[usize],
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        if control_label >= self.label_count {
            return Err(Error::InvalidInput(format!(
                "control label {control_label} out of range (have {})",
                self.label_count
            )));
        }
        let ctx = self.mean_context(corrupted)?;
        let (prev, pos_row, slot_row) = self.prefix_state(prefix)?;
        let (_, probs) = self.forward_step(control_label, &ctx, prev, pos_row, slot_row);
        Ok(probs)
    }

    fn fit(
        &mut self,
        train: &[MaskedTemplate],
        dev: &[MaskedTemplate],
        objective: &InfillObjective,
        config: &TrainConfig,
    ) -> Result<TrainingReport> {
        config.validate()?;
        objective.validate()?;
        if config.selection != SelectionMetric::DevPerplexity {
            return Err(Error::InvalidConfig(
                "generator checkpoints are selected by dev perplexity".into(),
            ));
        }
        if train.is_empty() {
            return Err(Error::InsufficientData("no templates to train on".into()));
        }
        for template in train.iter().chain(dev) {
            if template.control_label >= self.label_count {
                return Err(Error::InvalidInput(format!(
                    "example '{}': control label {} out of range (have {})",
                    template.origin_id, template.control_label, self.label_count
                )));
            }
        }
        let compiled: Vec<(CompiledTemplate, usize)> = train
            .iter()
            .map(|t| Ok((t.compile(&self.vocab)?, t.control_label)))
            .collect::<Result<_>>()?;

        let mut report = TrainingReport::untrained(SelectionMetric::DevPerplexity);
        if config.max_epochs == 0 {
            self.train_config = Some(config.clone());
            return Ok(report);
        }

        let mut adam: Vec<AdamState> = self
            .params
            .tensors()
            .iter()
            .map(|t| AdamState::new(t.len()))
            .collect();
        let mut order: Vec<usize> = (0..compiled.len()).collect();
        let mut grads = self.params.zeros_like();
        let mut best: Option<(f64, usize, GenParams)> = None;
        let mut evals_since_best = 0usize;

        for epoch in 1..=config.max_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                &["generator-epoch", &epoch.to_string()],
            ));
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);

            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                grads.zero();
                for &idx in batch {
                    let (compiled_template, gold) = &compiled[idx];
                    epoch_loss +=
                        self.accumulate_template(compiled_template, *gold, objective, &mut grads)?;
                }
                grads.scale(1.0 / batch.len() as f64);
                for ((state, param), grad) in adam
                    .iter_mut()
                    .zip(self.params.tensors_mut())
                    .zip(grads.tensors())
                {
                    state.step(param, grad, config.learning_rate);
                }
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
                let ppl = crate::infill::perplexity(self, dev)?;
                dev_metric = Some(ppl);
                let improved = best.as_ref().map_or(true, |(b, _, _)| ppl < *b);
                if improved {
                    best = Some((ppl, epoch, self.params.clone()));
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

        if let Some((metric, epoch, params)) = best {
            self.params = params;
            report.best_epoch = Some(epoch);
            report.best_metric = Some(metric);
        }
        self.train_config = Some(config.clone());
        Ok(report)
    }
}
