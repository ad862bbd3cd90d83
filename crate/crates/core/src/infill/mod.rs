//! Masked templates and label-controlled infilling.
//!
//! A template is an example whose rationale words were cut out and replaced
//! by slot markers. The generator reads the corrupted text plus a control
//! label and writes the missing spans back, one token at a time, emitting a
//! marker to close each span. Training targets interleave the original span
//! words with the closing markers, so span length is part of what the model
//! learns.

mod decode;
mod loss;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedText;
use crate::error::{Error, Result};
use crate::modelkit::GenVocab;

pub use decode::{
    decode_template, generate_candidates, CounterfactualCandidate, DecodeConfig, DecodeMode,
    SpanFill,
};
pub use loss::{mle_loss, perplexity, total_loss, unlikelihood_loss};

/// Canonical surface form of slot marker `k`.
pub fn slot_marker(k: usize) -> String {
    format!("<slot_{k}>")
}

/// The labels a counterfactual can target: every label except the origin's.
pub fn flipped_labels(label_count: usize, origin: usize) -> Vec<usize> {
    (0..label_count).filter(|&l| l != origin).collect()
}

/// One masked run of words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub segment: usize,
    /// Index of the marker inside the corrupted word sequence.
    pub marker_index: usize,
    /// Half-open word range the run occupied in the original text.
    pub original_range: (usize, usize),
}

/// An example with its rationale words replaced by slot markers, plus the
/// words that were removed (the generator's training targets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedTemplate {
    pub origin_id: String,
    /// Label the infill is conditioned on. At template build time this is the
    /// origin's gold label; `with_control` retargets it.
    pub control_label: usize,
    /// Original words with each masked run replaced by one marker word.
    pub words: Vec<String>,
    pub word_segment: Vec<usize>,
    pub segment_count: usize,
    pub slots: Vec<Slot>,
    /// Original words of each masked run, index-aligned with `slots`.
    pub targets: Vec<Vec<String>>,
}

/// One position of the generation target: a span token or the marker closing
/// a span. The unlikelihood term applies to span tokens only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetStep {
    pub token: usize,
    pub span_token: bool,
}

/// A template resolved against a generator vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledTemplate {
    pub corrupted: Vec<usize>,
    /// First prefix token: marker 0.
    pub start: usize,
    pub steps: Vec<TargetStep>,
}

/// Replace the rationale words of a tokenized text with slot markers.
/// Adjacent rationale words in the same segment collapse into one slot.
pub fn build_template(
    text: &TokenizedText,
    rationale_word_indices: &[usize],
    control_label: usize,
    origin_id: &str,
) -> Result<MaskedTemplate> {
    if rationale_word_indices.is_empty() {
        return Err(Error::InvalidInput(format!(
            "example '{origin_id}': cannot build a template from an empty rationale"
        )));
    }
    let mut indices: Vec<usize> = rationale_word_indices.to_vec();
    indices.sort_unstable();
    indices.dedup();
    if *indices.last().unwrap() >= text.m() {
        return Err(Error::InvalidInput(format!(
            "example '{origin_id}': rationale index {} out of range for {} words",
            indices.last().unwrap(),
            text.m()
        )));
    }

    // Group sorted indices into runs of adjacent words within one segment.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &idx in &indices {
        match runs.last_mut() {
            Some((_, end)) if *end == idx && text.word_segment[idx - 1] == text.word_segment[idx] => {
                *end = idx + 1;
            }
            _ => runs.push((idx, idx + 1)),
        }
    }

    let mut words = Vec::new();
    let mut word_segment = Vec::new();
    let mut slots = Vec::new();
    let mut targets = Vec::new();
    let mut next_run = 0;
    let mut word = 0;
    while word < text.m() {
        if next_run < runs.len() && runs[next_run].0 == word {
            let (start, end) = runs[next_run];
            slots.push(Slot {
                segment: text.word_segment[start],
                marker_index: words.len(),
                original_range: (start, end),
            });
            targets.push(text.words[start..end].to_vec());
            words.push(slot_marker(next_run));
            word_segment.push(text.word_segment[start]);
            word = end;
            next_run += 1;
        } else {
            words.push(text.words[word].clone());
            word_segment.push(text.word_segment[word]);
            word += 1;
        }
    }

    Ok(MaskedTemplate {
        origin_id: origin_id.to_string(),
        control_label,
        words,
        word_segment,
        segment_count: text.segment_count,
        slots,
        targets,
    })
}

impl MaskedTemplate {
    pub fn with_control(&self, label: usize) -> MaskedTemplate {
        MaskedTemplate {
            control_label: label,
            ..self.clone()
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Map words and targets to generator token ids and lay out the target
    /// step sequence: span tokens followed by the marker that closes the span.
    pub fn compile(&self, vocab: &GenVocab) -> Result<CompiledTemplate> {
        if self.slots.len() > vocab.max_slots() {
            return Err(Error::InvalidInput(format!(
                "example '{}': {} slots exceed the generator's limit of {}",
                self.origin_id,
                self.slots.len(),
                vocab.max_slots()
            )));
        }
        let corrupted: Vec<usize> = self.words.iter().map(|w| vocab.id(w)).collect();
        let mut steps = Vec::new();
        for (k, span) in self.targets.iter().enumerate() {
            for word in span {
                steps.push(TargetStep {
                    token: vocab.id(word),
                    span_token: true,
                });
            }
            steps.push(TargetStep {
                token: vocab.marker_id(k + 1)?,
                span_token: false,
            });
        }
        Ok(CompiledTemplate {
            corrupted,
            start: vocab.marker_id(0)?,
            steps,
        })
    }

    /// Put filled spans back into the corrupted text. Returns one string per
    /// segment; a segment can come back empty if every word in it was masked
    /// and its fill is empty.
    pub fn reconstruct(&self, fills: &[Vec<String>]) -> Result<Vec<String>> {
        if fills.len() != self.slots.len() {
            return Err(Error::InvalidInput(format!(
                "example '{}': {} fills for {} slots",
                self.origin_id,
                fills.len(),
                self.slots.len()
            )));
        }
        let mut segments: Vec<Vec<&str>> = vec![Vec::new(); self.segment_count];
        let mut slot_at: Vec<Option<usize>> = vec![None; self.words.len()];
        for (k, slot) in self.slots.iter().enumerate() {
            slot_at[slot.marker_index] = Some(k);
        }
        for (i, word) in self.words.iter().enumerate() {
            match slot_at[i] {
                Some(k) => {
                    for fill in &fills[k] {
                        segments[self.slots[k].segment].push(fill);
                    }
                }
                None => segments[self.word_segment[i]].push(word),
            }
        }
        Ok(segments.into_iter().map(|words| words.join(" ")).collect())
    }
}

#[cfg(test)]
pub(crate) mod testgen {
    use super::MaskedTemplate;
    use crate::error::Result;
    use crate::modelkit::{
        GenVocab, GeneratorBackend, InfillObjective, TrainConfig, TrainingReport,
    };

    /// Test backend whose step distributions come from a fixed table indexed
    /// by control label and prefix length. Lookups past the last row clamp to
    /// it; querying a label with no rows fails loudly.
    pub(crate) struct ScriptedGenerator {
        pub vocab: GenVocab,
        pub label_count: usize,
        pub table: Vec<Vec<Vec<f64>>>,
    }

    impl GeneratorBackend for ScriptedGenerator {
        fn vocab(&self) -> &GenVocab {
            &self.vocab
        }

        fn label_count(&self) -> usize {
            self.label_count
        }

        fn step_distribution(
            &self,
            control_label: usize,
            _corrupted: &[usize],
            prefix: &[usize],
        ) -> Result<Vec<f64>> {
            let rows = &self.table[control_label];
            assert!(
                !rows.is_empty(),
                "label {control_label} was queried but has no scripted rows"
            );
            let row = (prefix.len() - 1).min(rows.len() - 1);
            Ok(rows[row].clone())
        }

        fn fit(
            &mut self,
            _train: &[MaskedTemplate],
            _dev: &[MaskedTemplate],
            _objective: &InfillObjective,
            _config: &TrainConfig,
        ) -> Result<TrainingReport> {
            unreachable!("scripted backend is not trainable")
        }
    }
}
