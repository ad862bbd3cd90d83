//! Metrics for generated counterfactuals and retrained classifiers.
//!
//! Flipping rate asks how often a judge agrees that a candidate landed on
//! its requested label; distinct-n measures lexical variety of the filled
//! spans; `evaluate_classifier` reports accuracy per named evaluation set.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedDataset, Tokenizer, TriggerOracle};
use crate::error::{Error, Result};
use crate::infill::CounterfactualCandidate;
use crate::modelkit::{accuracy, predict_label, ClassifierBackend};

// ---------------------------------------------------------------------------
// Judges
// ---------------------------------------------------------------------------

/// Who decides which label a candidate text carries: a trained classifier or
/// the synthetic trigger-majority rule.
pub enum Judge<'a> {
    Classifier {
        backend: &'a dyn ClassifierBackend,
        tokenizer: &'a dyn Tokenizer,
    },
    Oracle(&'a TriggerOracle),
}

impl Judge<'_> {
    /// The judge's label for a text, `None` when it cannot commit (an oracle
    /// tie, including texts without any trigger).
    pub fn label(&self, segments: &[String]) -> Result<Option<usize>> {
        match self {
            Judge::Classifier { backend, tokenizer } => {
                let text = tokenizer.tokenize_align(segments)?;
                Ok(Some(predict_label(*backend, &text)?))
            }
            Judge::Oracle(oracle) => Ok(oracle.judge_segments(segments)),
        }
    }
}

// ---------------------------------------------------------------------------
// Flipping rate
// ---------------------------------------------------------------------------

/// Fraction of candidates whose judged label equals their requested target.
/// Undecided judgements count against the rate.
pub fn flipping_rate(candidates: &[CounterfactualCandidate], judge: &Judge) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::UndefinedMetric(
            "flipping rate over zero candidates".into(),
        ));
    }
    let mut flipped = 0usize;
    for candidate in candidates {
        if judge.label(&candidate.segments)? == Some(candidate.target_label) {
            flipped += 1;
        }
    }
    Ok(flipped as f64 / candidates.len() as f64)
}

// ---------------------------------------------------------------------------
// Distinct-n
// ---------------------------------------------------------------------------

/// The words a candidate actually generated: every filled span joined in
/// slot order. Diversity metrics look only at this, never at the carried-over
/// context.
pub fn candidate_span_text(candidate: &CounterfactualCandidate) -> String {
    candidate
        .filled_spans
        .iter()
        .flat_map(|fill| fill.words.iter().map(String::as_str))
        .collect::<Vec<&str>>()
        .join(" ")
}

/// Pooled distinct-n: unique word n-grams across all texts divided by the
/// total n-gram count. Texts shorter than `n` words contribute nothing.
pub fn distinct_n(texts: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("distinct-n needs n >= 1".into()));
    }
    let mut unique: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for text in texts {
        let words: Vec<&str> = text.split_whitespace().collect();
        for gram in words.windows(n) {
            unique.insert(gram.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(format!(
            "no {n}-grams in {} texts",
            texts.len()
        )));
    }
    Ok(unique.len() as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Bundled generation metrics
// ---------------------------------------------------------------------------

/// Flipping rate plus distinct-n at the requested orders for one batch of
/// candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub flipping_rate: f64,
    /// Order -> pooled distinct score over the filled spans.
    pub distinct: BTreeMap<usize, f64>,
    pub candidate_count: usize,
}

pub fn generation_metrics(
    candidates: &[CounterfactualCandidate],
    judge: &Judge,
    orders: &[usize],
) -> Result<GenerationMetrics> {
    let fr = flipping_rate(candidates, judge)?;
    let texts: Vec<String> = candidates.iter().map(candidate_span_text).collect();
    let mut distinct = BTreeMap::new();
    for &n in orders {
        distinct.insert(n, distinct_n(&texts, n)?);
    }
    Ok(GenerationMetrics {
        flipping_rate: fr,
        distinct,
        candidate_count: candidates.len(),
    })
}

// ---------------------------------------------------------------------------
// Classifier evaluation
// ---------------------------------------------------------------------------

/// Accuracy per named evaluation set, in the order given. Any empty set is
/// an error since its accuracy would be undefined.
pub fn evaluate_classifier(
    backend: &dyn ClassifierBackend,
    sets: &[(String, &TokenizedDataset)],
) -> Result<BTreeMap<String, f64>> {
    let mut report = BTreeMap::new();
    for (name, set) in sets {
        if set.is_empty() {
            return Err(Error::UndefinedMetric(format!(
                "accuracy of empty evaluation set '{name}'"
            )));
        }
        report.insert(name.clone(), accuracy(backend, set)?);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SyntheticTask, WhitespaceTokenizer};
    use crate::infill::SpanFill;
    use crate::modelkit::{ClassifierDims, ReferenceClassifier, Vocab};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn candidate(
        id: &str,
        target: usize,
        segments: Vec<&str>,
        spans: Vec<Vec<&str>>,
    ) -> CounterfactualCandidate {
        CounterfactualCandidate {
            origin_id: id.into(),
            origin_label: 0,
            target_label: target,
            sample_index: 0,
            segments: segments.into_iter().map(String::from).collect(),
            filled_spans: spans
                .into_iter()
                .map(|words| SpanFill {
                    words: words.into_iter().map(String::from).collect(),
                    truncated: false,
                })
                .collect(),
            degenerate: false,
            truncated: false,
        }
    }

    #[test]
    fn distinct_two_matches_the_hand_count() {
        let texts = vec!["a b a b".to_string()];
        let d = distinct_n(&texts, 2).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_one_pools_identical_words() {
        let texts = vec![
            "same".to_string(),
            "same".to_string(),
            "same".to_string(),
            "same".to_string(),
        ];
        assert_eq!(distinct_n(&texts, 1).unwrap(), 0.25);
    }

    #[test]
    fn duplicating_every_text_halves_distinct_n() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let texts: Vec<String> = (0..rng.gen_range(1..6))
                .map(|_| {
                    (0..rng.gen_range(2..8))
                        .map(|_| format!("t{}", rng.gen_range(0..10)))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            let Ok(single) = distinct_n(&texts, 2) else {
                continue;
            };
            let doubled: Vec<String> = texts.iter().chain(texts.iter()).cloned().collect();
            let twice = distinct_n(&doubled, 2).unwrap();
            assert!((twice - single / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_short_texts_leave_the_metric_undefined() {
        let texts = vec!["one".to_string(), "two".to_string()];
        assert!(matches!(
            distinct_n(&texts, 2),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            distinct_n(&[], 1),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(distinct_n(&texts, 0).is_err());
    }

    #[test]
    fn distinct_matches_brute_force_recomputation() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..500 {
            let texts: Vec<String> = (0..rng.gen_range(1..5))
                .map(|_| {
                    (0..rng.gen_range(1..7))
                        .map(|_| format!("v{}", rng.gen_range(0..5)))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            let n = rng.gen_range(1..4);

            // Oracle: list every n-gram as a joined string, count uniques by
            // linear scan.
            let mut grams: Vec<String> = Vec::new();
            for text in &texts {
                let words: Vec<&str> = text.split_whitespace().collect();
                if words.len() < n {
                    continue;
                }
                for start in 0..=(words.len() - n) {
                    grams.push(words[start..start + n].join("\u{1}"));
                }
            }
            let mut uniques: Vec<&str> = Vec::new();
            for gram in &grams {
                if !uniques.contains(&gram.as_str()) {
                    uniques.push(gram);
                }
            }
            let expected = if grams.is_empty() {
                None
            } else {
                Some(uniques.len() as f64 / grams.len() as f64)
            };
            match (distinct_n(&texts, n), expected) {
                (Ok(d), Some(e)) => assert!((d - e).abs() < 1e-12),
                (Err(Error::UndefinedMetric(_)), None) => {}
                (got, want) => panic!("distinct mismatch: {got:?} vs {want:?}"),
            }
        }
    }

    #[test]
    fn oracle_judge_counts_trigger_majorities() {
        let task = SyntheticTask::binary(1);
        let oracle = TriggerOracle::new(&task).unwrap();
        let judge = Judge::Oracle(&oracle);

        let hit = candidate("a", 1, vec!["w000 great w001"], vec![vec!["great"]]);
        let miss = candidate("b", 1, vec!["w000 awful w001"], vec![vec!["awful"]]);
        let tie = candidate("c", 1, vec!["great awful"], vec![vec!["great"]]);

        let fr = flipping_rate(&[hit, miss, tie], &judge).unwrap();
        assert!((fr - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_list_is_an_error() {
        let task = SyntheticTask::binary(1);
        let oracle = TriggerOracle::new(&task).unwrap();
        assert!(matches!(
            flipping_rate(&[], &Judge::Oracle(&oracle)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn flipping_rate_matches_brute_force_recomputation() {
        let task = SyntheticTask::binary(1);
        let oracle = TriggerOracle::new(&task).unwrap();
        let judge = Judge::Oracle(&oracle);
        let words = ["great", "awful", "w000", "w001"];
        let mut rng = StdRng::seed_from_u64(77);
        for _ in 0..500 {
            let candidates: Vec<CounterfactualCandidate> = (0..rng.gen_range(1..12))
                .map(|i| {
                    let text: Vec<&str> = (0..rng.gen_range(1..6))
                        .map(|_| words[rng.gen_range(0..words.len())])
                        .collect();
                    candidate(
                        &format!("c{i}"),
                        rng.gen_range(0..2),
                        vec![&text.join(" ")],
                        vec![],
                    )
                })
                .collect();

            let mut hits = 0usize;
            for c in &candidates {
                let judged = oracle.judge_segments(&c.segments);
                if judged == Some(c.target_label) {
                    hits += 1;
                }
            }
            let expected = hits as f64 / candidates.len() as f64;
            let got = flipping_rate(&candidates, &judge).unwrap();
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_judge_agrees_with_direct_prediction() {
        let vocab = Vocab::build([], ["alpha", "beta", "gamma"].into_iter());
        let clf = ReferenceClassifier::new(vocab, 2, 1, ClassifierDims::default(), 3).unwrap();
        let tok = WhitespaceTokenizer;
        let judge = Judge::Classifier {
            backend: &clf,
            tokenizer: &tok,
        };
        let segments = vec!["alpha beta gamma".to_string()];
        let direct = predict_label(&clf, &tok.tokenize_align(&segments).unwrap()).unwrap();
        assert_eq!(judge.label(&segments).unwrap(), Some(direct));
    }

    #[test]
    fn span_text_joins_fills_in_slot_order() {
        let c = candidate(
            "x",
            1,
            vec!["irrelevant"],
            vec![vec!["first", "span"], vec!["second"]],
        );
        assert_eq!(candidate_span_text(&c), "first span second");
        assert_eq!(
            candidate_span_text(&candidate("y", 1, vec!["ctx"], vec![])),
            ""
        );
    }

    #[test]
    fn bundled_metrics_report_every_requested_order() {
        let task = SyntheticTask::binary(1);
        let oracle = TriggerOracle::new(&task).unwrap();
        let judge = Judge::Oracle(&oracle);
        let candidates = vec![
            candidate("a", 1, vec!["great w000"], vec![vec!["great", "w000"]]),
            candidate("b", 0, vec!["awful w001"], vec![vec!["awful", "w001"]]),
        ];
        let metrics = generation_metrics(&candidates, &judge, &[1, 2]).unwrap();
        assert_eq!(metrics.candidate_count, 2);
        assert_eq!(metrics.flipping_rate, 1.0);
        assert_eq!(metrics.distinct.len(), 2);
        assert_eq!(metrics.distinct[&1], 1.0);
    }

    #[test]
    fn evaluation_requires_non_empty_sets() {
        let vocab = Vocab::build([], ["alpha"].into_iter());
        let clf = ReferenceClassifier::new(vocab, 2, 1, ClassifierDims::default(), 5).unwrap();
        let empty = TokenizedDataset { items: vec![] };
        let sets = [("dev".to_string(), &empty)];
        assert!(matches!(
            evaluate_classifier(&clf, &sets),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn evaluation_reports_per_set_accuracy() {
        use crate::corpus::tokenize_dataset;
        let mut task = SyntheticTask::binary(2);
        task.counts = crate::corpus::SplitCounts {
            train: 20,
            dev: 10,
            test_id: 10,
            test_ood: 10,
        };
        let corpus = task.generate().unwrap();
        let dev = tokenize_dataset(&corpus.dev, &WhitespaceTokenizer).unwrap();
        let test = tokenize_dataset(&corpus.test_id, &WhitespaceTokenizer).unwrap();
        let vocab = Vocab::build(
            [],
            dev.iter()
                .flat_map(|item| item.text.subtokens.iter().map(String::as_str)),
        );
        let clf = ReferenceClassifier::new(vocab, 2, 1, ClassifierDims::default(), 6).unwrap();
        let sets = [("dev".to_string(), &dev), ("test_id".to_string(), &test)];
        let report = evaluate_classifier(&clf, &sets).unwrap();
        assert_eq!(report.len(), 2);
        assert_eq!(report["dev"], accuracy(&clf, &dev).unwrap());
        assert_eq!(report["test_id"], accuracy(&clf, &test).unwrap());
    }
}
