//! Gradient-based rationale identification.
//!
//! A rationale is the subset of words a trained classifier leans on for its
//! decision. Token scores come from the l2 norms of embedding gradients of
//! the gold-label logit, words take the maximum over their subtokens, and
//! the top share of words (by `pi` percent) forms the selection. Examples
//! the classifier gets wrong are skipped rather than annotated with noise.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{RationaleAnnotations, TokenizedDataset, TokenizedExample, TokenizedText};
use crate::error::{Error, Result};
use crate::modelkit::{predict_label, ClassifierBackend};

pub mod noise;

// ---------------------------------------------------------------------------
// Saliency scores
// ---------------------------------------------------------------------------

/// Per-subtoken and per-word saliency for one example, normalized so the
/// subtoken scores sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub token_scores: Vec<f64>,
    pub word_scores: Vec<f64>,
    /// Label whose logit was differentiated.
    pub label_used: usize,
}

/// Normalized gradient-norm score for every subtoken position. `id` is only
/// used in error messages.
pub fn token_saliency(
    classifier: &dyn ClassifierBackend,
    id: &str,
    text: &TokenizedText,
    label: usize,
) -> Result<Vec<f64>> {
    let grads = classifier.embedding_gradients(label, text)?;
    let norms: Vec<f64> = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let total: f64 = norms.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateSaliency { id: id.to_string() });
    }
    Ok(norms.into_iter().map(|n| n / total).collect())
}

/// Word scores from subtoken scores: each word takes the maximum over its
/// own subtokens.
pub fn word_saliency(token_scores: &[f64], text: &TokenizedText) -> Result<Vec<f64>> {
    if token_scores.len() != text.n() {
        return Err(Error::InvalidInput(format!(
            "{} token scores for {} subtokens",
            token_scores.len(),
            text.n()
        )));
    }
    let mut scores = Vec::with_capacity(text.m());
    for word in 0..text.m() {
        let range = text
            .subtoken_range(word)
            .ok_or_else(|| Error::InvalidInput(format!("word {word} out of range")))?;
        let best = token_scores[range]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        scores.push(best);
    }
    Ok(scores)
}

/// Token and word saliency for one example, scored against its gold label.
pub fn saliency_map(
    classifier: &dyn ClassifierBackend,
    example: &TokenizedExample,
) -> Result<SaliencyMap> {
    let label = example.label.id();
    let token_scores = token_saliency(classifier, &example.id, &example.text, label)?;
    let word_scores = word_saliency(&token_scores, &example.text)?;
    Ok(SaliencyMap {
        token_scores,
        word_scores,
        label_used: label,
    })
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Rationale for one example: the selected word indices, sorted ascending.
/// Skipped examples (misclassified or degenerate saliency) keep an empty
/// index list and `skipped = true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleSelection {
    pub id: String,
    pub word_indices: Vec<usize>,
    pub pi: f64,
    pub skipped: bool,
}

/// Tally of why examples were kept or dropped during extraction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RationaleReport {
    pub total: usize,
    pub kept: usize,
    pub skipped_mispredicted: usize,
    pub skipped_degenerate: usize,
}

/// Number of words selected for a `m`-word example at `pi` percent: the
/// ceiling of `pi * m / 100`, at least one word, never more than `m`.
pub fn rationale_budget(pi: f64, m: usize) -> usize {
    let raw = pi * m as f64 / 100.0;
    // Snap values that are an integer up to float noise so the ceiling does
    // not jump a whole word on a representation artifact.
    let snapped = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw
    };
    (snapped.ceil() as usize).clamp(1, m)
}

/// Check that a rationale percentage lies in (0, 100].
pub fn validate_pi(pi: f64) -> Result<()> {
    if !pi.is_finite() || pi <= 0.0 || pi > 100.0 {
        return Err(Error::InvalidConfig(format!(
            "pi must lie in (0, 100], got {pi}"
        )));
    }
    Ok(())
}

/// Indices of the `k` highest scores, ties broken toward the lower index,
/// returned in ascending index order.
fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

enum SkipReason {
    Mispredicted,
    Degenerate,
}

fn select_one(
    classifier: &dyn ClassifierBackend,
    example: &TokenizedExample,
    pi: f64,
) -> Result<(RationaleSelection, Option<SkipReason>)> {
    let skipped = |reason| {
        (
            RationaleSelection {
                id: example.id.clone(),
                word_indices: Vec::new(),
                pi,
                skipped: true,
            },
            Some(reason),
        )
    };

    let predicted = predict_label(classifier, &example.text)?;
    if predicted != example.label.id() {
        return Ok(skipped(SkipReason::Mispredicted));
    }
    let map = match saliency_map(classifier, example) {
        Ok(map) => map,
        Err(Error::DegenerateSaliency { .. }) => return Ok(skipped(SkipReason::Degenerate)),
        Err(other) => return Err(other),
    };
    let k = rationale_budget(pi, example.text.m());
    Ok((
        RationaleSelection {
            id: example.id.clone(),
            word_indices: top_k_indices(&map.word_scores, k),
            pi,
            skipped: false,
        },
        None,
    ))
}

/// Rationale selection for a single example. Misclassified examples and
/// examples with degenerate saliency come back with `skipped = true`.
pub fn select_rationales(
    classifier: &dyn ClassifierBackend,
    example: &TokenizedExample,
    pi: f64,
) -> Result<RationaleSelection> {
    validate_pi(pi)?;
    select_one(classifier, example, pi).map(|(selection, _)| selection)
}

/// Rationales for a whole dataset, one selection per example in dataset
/// order, plus a tally of skips.
pub fn extract_rationales(
    classifier: &dyn ClassifierBackend,
    data: &TokenizedDataset,
    pi: f64,
) -> Result<(Vec<RationaleSelection>, RationaleReport)> {
    validate_pi(pi)?;
    let mut selections = Vec::with_capacity(data.len());
    let mut report = RationaleReport {
        total: data.len(),
        ..RationaleReport::default()
    };
    for example in data.iter() {
        let (selection, skip) = select_one(classifier, example, pi)?;
        match skip {
            None => report.kept += 1,
            Some(SkipReason::Mispredicted) => report.skipped_mispredicted += 1,
            Some(SkipReason::Degenerate) => report.skipped_degenerate += 1,
        }
        selections.push(selection);
    }
    Ok((selections, report))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// One selection per line as JSON.
pub fn save_selections(selections: &[RationaleSelection], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for selection in selections {
        let line = serde_json::to_string(selection)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_selections(path: impl AsRef<Path>) -> Result<Vec<RationaleSelection>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut selections = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let selection: RationaleSelection =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        let sorted = selection.word_indices.windows(2).all(|w| w[0] < w[1]);
        if !sorted {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "word_indices must be strictly ascending".into(),
            });
        }
        selections.push(selection);
    }
    Ok(selections)
}

// ---------------------------------------------------------------------------
// Agreement with golden annotations
// ---------------------------------------------------------------------------

/// Set F1 between a selection and a golden index set. Two empty sets agree
/// perfectly; otherwise an empty side scores zero.
pub fn rationale_f1(selected: &[usize], golden: &[usize]) -> f64 {
    let selected: BTreeSet<usize> = selected.iter().copied().collect();
    let golden: BTreeSet<usize> = golden.iter().copied().collect();
    if selected.is_empty() && golden.is_empty() {
        return 1.0;
    }
    let overlap = selected.intersection(&golden).count() as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let precision = overlap / selected.len() as f64;
    let recall = overlap / golden.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Mean per-example F1 over the non-skipped selections. Every kept selection
/// must have a golden annotation.
pub fn macro_rationale_f1(
    selections: &[RationaleSelection],
    golden: &RationaleAnnotations,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for selection in selections.iter().filter(|s| !s.skipped) {
        let truth = golden.get(&selection.id).ok_or_else(|| {
            Error::AnnotationMismatch {
                id: selection.id.clone(),
                message: "no golden rationale for this example".into(),
            }
        })?;
        sum += rationale_f1(&selection.word_indices, truth);
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "macro rationale F1 over zero kept selections".into(),
        ));
    }
    Ok(sum / count as f64)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
