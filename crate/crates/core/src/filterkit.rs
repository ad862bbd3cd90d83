//! Consistency filtering of generated counterfactuals.
//!
//! A candidate asked to land on a target label is kept only if a classifier
//! reads it back as exactly that label. Degenerate candidates are rejected
//! before any classification, and a candidate whose text cannot even be
//! tokenized is a rejection, never a pipeline failure.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabelSet, Tokenizer};
use crate::error::{Error, Result};
use crate::infill::CounterfactualCandidate;
use crate::modelkit::ClassifierBackend;

/// Labels a counterfactual can be steered toward: every label except the
/// origin's own, in id order.
pub fn enumerate_targets(origin: &Label, labels: &LabelSet) -> Vec<Label> {
    labels
        .iter()
        .filter(|label| label.id() != origin.id())
        .cloned()
        .collect()
}

/// Filter settings. The probability threshold is off by default; when set,
/// a candidate must be judged as its target with at least this confidence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_probability: Option<f64>,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.min_probability {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "min_probability must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Why a candidate was turned away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Degenerate,
    Tokenization,
    LabelMismatch,
    BelowMinProbability,
    /// A sibling candidate for the same origin and target scored higher
    /// under best-probability selection.
    Outscored,
}

/// A candidate plus the filter's verdict. Degenerate and untokenizable
/// candidates carry no prediction because the classifier never saw them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredCandidate {
    #[serde(flatten)]
    pub candidate: CounterfactualCandidate,
    pub predicted_label: Option<usize>,
    pub predicted_prob: Option<f64>,
    pub accepted: bool,
    pub rejection: Option<Rejection>,
}

/// Accepted/rejected counts for one target label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCell {
    pub accepted: usize,
    pub rejected: usize,
}

/// Aggregate filter outcome. All rejection counts plus `accepted` sum to
/// `total`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub accepted: usize,
    pub degenerate: usize,
    pub tokenization_failures: usize,
    pub label_mismatches: usize,
    pub below_min_probability: usize,
    pub outscored: usize,
    pub acceptance_rate: f64,
    pub per_target: BTreeMap<usize, TargetCell>,
}

impl FilterReport {
    fn tally(records: &[FilteredCandidate]) -> FilterReport {
        let mut report = FilterReport {
            total: records.len(),
            ..FilterReport::default()
        };
        for record in records {
            let cell = report
                .per_target
                .entry(record.candidate.target_label)
                .or_default();
            if record.accepted {
                report.accepted += 1;
                cell.accepted += 1;
            } else {
                cell.rejected += 1;
            }
            match record.rejection {
                Some(Rejection::Degenerate) => report.degenerate += 1,
                Some(Rejection::Tokenization) => report.tokenization_failures += 1,
                Some(Rejection::LabelMismatch) => report.label_mismatches += 1,
                Some(Rejection::BelowMinProbability) => report.below_min_probability += 1,
                Some(Rejection::Outscored) => report.outscored += 1,
                None => {}
            }
        }
        if report.total > 0 {
            report.acceptance_rate = report.accepted as f64 / report.total as f64;
        }
        report
    }
}

fn judge_one(
    candidate: &CounterfactualCandidate,
    backend: &dyn ClassifierBackend,
    tokenizer: &dyn Tokenizer,
    config: &FilterConfig,
) -> Result<FilteredCandidate> {
    if candidate.target_label >= backend.label_count() {
        return Err(Error::InvalidInput(format!(
            "candidate '{}' targets label {} but the classifier knows {}",
            candidate.candidate_id(),
            candidate.target_label,
            backend.label_count()
        )));
    }
    let rejected = |rejection| FilteredCandidate {
        candidate: candidate.clone(),
        predicted_label: None,
        predicted_prob: None,
        accepted: false,
        rejection: Some(rejection),
    };

    if candidate.degenerate {
        return Ok(rejected(Rejection::Degenerate));
    }
    let Ok(text) = tokenizer.tokenize_align(&candidate.segments) else {
        return Ok(rejected(Rejection::Tokenization));
    };
    let probs = backend.predict_proba(&text)?;
    let predicted = crate::modelkit::math::argmax(&probs);
    let prob = probs[predicted];

    let rejection = if predicted != candidate.target_label {
        Some(Rejection::LabelMismatch)
    } else if config.min_probability.is_some_and(|t| prob < t) {
        Some(Rejection::BelowMinProbability)
    } else {
        None
    };
    Ok(FilteredCandidate {
        candidate: candidate.clone(),
        predicted_label: Some(predicted),
        predicted_prob: Some(prob),
        accepted: rejection.is_none(),
        rejection,
    })
}

/// Judge every candidate with the classifier and keep those read back as
/// their target label. Records come back in input order, one per candidate.
pub fn consistency_filter(
    candidates: &[CounterfactualCandidate],
    backend: &dyn ClassifierBackend,
    tokenizer: &dyn Tokenizer,
    config: &FilterConfig,
) -> Result<(Vec<FilteredCandidate>, FilterReport)> {
    config.validate()?;
    let records: Vec<FilteredCandidate> = candidates
        .par_iter()
        .map(|candidate| judge_one(candidate, backend, tokenizer, config))
        .collect::<Result<_>>()?;
    let report = FilterReport::tally(&records);
    Ok((records, report))
}

#[derive(Clone, Copy)]
enum Scored {
    Unjudgeable(Rejection),
    Judged { argmax: usize, target_prob: f64 },
}

fn score_one(
    candidate: &CounterfactualCandidate,
    backend: &dyn ClassifierBackend,
    tokenizer: &dyn Tokenizer,
) -> Result<Scored> {
    if candidate.target_label >= backend.label_count() {
        return Err(Error::InvalidInput(format!(
            "candidate '{}' targets label {} but the classifier knows {}",
            candidate.candidate_id(),
            candidate.target_label,
            backend.label_count()
        )));
    }
    if candidate.degenerate {
        return Ok(Scored::Unjudgeable(Rejection::Degenerate));
    }
    let Ok(text) = tokenizer.tokenize_align(&candidate.segments) else {
        return Ok(Scored::Unjudgeable(Rejection::Tokenization));
    };
    let probs = backend.predict_proba(&text)?;
    Ok(Scored::Judged {
        argmax: crate::modelkit::math::argmax(&probs),
        target_prob: probs[candidate.target_label],
    })
}

/// Keep, for every (origin, target label) group, the single candidate the
/// classifier gives the highest target-label probability, whether or not
/// that label wins the argmax. Ties go to the lowest sample index. The
/// other judgeable candidates in the group are marked outscored; a winner
/// below `min_probability` is rejected and its group keeps nothing. On
/// judged records `predicted_prob` is the target-label probability, not
/// the argmax one.
pub fn best_probability_select(
    candidates: &[CounterfactualCandidate],
    backend: &dyn ClassifierBackend,
    tokenizer: &dyn Tokenizer,
    config: &FilterConfig,
) -> Result<(Vec<FilteredCandidate>, FilterReport)> {
    config.validate()?;
    let scored: Vec<Scored> = candidates
        .par_iter()
        .map(|candidate| score_one(candidate, backend, tokenizer))
        .collect::<Result<_>>()?;

    let mut winners: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    for (i, score) in scored.iter().enumerate() {
        let Scored::Judged { target_prob, .. } = score else {
            continue;
        };
        let key = (candidates[i].origin_id.as_str(), candidates[i].target_label);
        match winners.get(&key) {
            None => {
                winners.insert(key, i);
            }
            Some(&best) => {
                let Scored::Judged {
                    target_prob: best_prob,
                    ..
                } = scored[best]
                else {
                    unreachable!("winners only hold judged candidates");
                };
                if *target_prob > best_prob
                    || (*target_prob == best_prob
                        && candidates[i].sample_index < candidates[best].sample_index)
                {
                    winners.insert(key, i);
                }
            }
        }
    }

    let records: Vec<FilteredCandidate> = candidates
        .iter()
        .zip(&scored)
        .enumerate()
        .map(|(i, (candidate, score))| match *score {
            Scored::Unjudgeable(rejection) => FilteredCandidate {
                candidate: candidate.clone(),
                predicted_label: None,
                predicted_prob: None,
                accepted: false,
                rejection: Some(rejection),
            },
            Scored::Judged { argmax, target_prob } => {
                let key = (candidate.origin_id.as_str(), candidate.target_label);
                let rejection = if winners.get(&key) != Some(&i) {
                    Some(Rejection::Outscored)
                } else if config.min_probability.is_some_and(|t| target_prob < t) {
                    Some(Rejection::BelowMinProbability)
                } else {
                    None
                };
                FilteredCandidate {
                    candidate: candidate.clone(),
                    predicted_label: Some(argmax),
                    predicted_prob: Some(target_prob),
                    accepted: rejection.is_none(),
                    rejection,
                }
            }
        })
        .collect();
    let report = FilterReport::tally(&records);
    Ok((records, report))
}

/// The accepted candidates from a filtered batch, cloned out of their
/// verdict wrappers in order.
pub fn accepted_candidates(records: &[FilteredCandidate]) -> Vec<CounterfactualCandidate> {
    records
        .iter()
        .filter(|record| record.accepted)
        .map(|record| record.candidate.clone())
        .collect()
}
