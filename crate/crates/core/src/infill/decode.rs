//! Span decoding: greedy or nucleus sampling, one slot at a time. Any marker
//! token ends the current span; the canonical closing marker is what goes
//! into the prefix, so a model that emits the wrong marker still leaves a
//! well-formed state behind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::infill::{flipped_labels, MaskedTemplate};
use crate::modelkit::math::argmax;
use crate::modelkit::GeneratorBackend;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    /// Highest-probability token at every step.
    Greedy,
    /// Sample from the smallest probability mass reaching `top_p`, after
    /// temperature reshaping.
    Nucleus { top_p: f64, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Hard cap on tokens per span; hitting it flags the fill as truncated.
    pub max_span_tokens: usize,
    /// Candidates drawn per (example, target label).
    pub num_samples: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn nucleus(seed: u64) -> Self {
        DecodeConfig {
            mode: DecodeMode::Nucleus {
                top_p: 0.9,
                temperature: 1.0,
            },
            max_span_tokens: 6,
            num_samples: 1,
            seed,
        }
    }

    pub fn greedy(seed: u64) -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            max_span_tokens: 6,
            num_samples: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DecodeMode::Nucleus { top_p, temperature } = self.mode {
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "top_p {top_p} must lie in (0, 1]"
                )));
            }
            if !temperature.is_finite() || temperature <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "temperature {temperature} must be positive"
                )));
            }
        }
        if self.max_span_tokens == 0 {
            return Err(Error::InvalidConfig(
                "max_span_tokens must be positive".into(),
            ));
        }
        if self.num_samples == 0 {
            return Err(Error::InvalidConfig("num_samples must be positive".into()));
        }
        Ok(())
    }
}

/// One decoded slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanFill {
    pub words: Vec<String>,
    pub truncated: bool,
}

/// A generated counterfactual before consistency filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualCandidate {
    pub origin_id: String,
    pub origin_label: usize,
    pub target_label: usize,
    pub sample_index: usize,
    /// Reconstructed text, one string per segment.
    pub segments: Vec<String>,
    pub filled_spans: Vec<SpanFill>,
    /// An empty span or an empty segment came out of reconstruction.
    pub degenerate: bool,
    /// Some span hit the length cap.
    pub truncated: bool,
}

impl CounterfactualCandidate {
    /// Stable id distinguishing this candidate from its origin and siblings.
    pub fn candidate_id(&self) -> String {
        format!(
            "{}#cf{}s{}",
            self.origin_id, self.target_label, self.sample_index
        )
    }
}

/// Temperature-reshape a distribution, keep the smallest prefix of
/// probability mass reaching `top_p` (ties broken toward lower index), zero
/// the rest, and renormalize. The returned vector is full-size.
pub fn nucleus_filter(dist: &[f64], top_p: f64, temperature: f64) -> Vec<f64> {
    let tempered: Vec<f64> = if (temperature - 1.0).abs() < 1e-12 {
        dist.to_vec()
    } else {
        let powered: Vec<f64> = dist.iter().map(|&p| p.powf(1.0 / temperature)).collect();
        let sum: f64 = powered.iter().sum();
        powered.iter().map(|&p| p / sum).collect()
    };
    let mut order: Vec<usize> = (0..tempered.len()).collect();
    order.sort_by(|&a, &b| tempered[b].partial_cmp(&tempered[a]).unwrap());
    let mut kept = vec![false; tempered.len()];
    let mut cum = 0.0;
    for &i in &order {
        kept[i] = true;
        cum += tempered[i];
        if cum >= top_p {
            break;
        }
    }
    let mass: f64 = tempered
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .map(|(&p, _)| p)
        .sum();
    tempered
        .iter()
        .zip(&kept)
        .map(|(&p, &k)| if k { p / mass } else { 0.0 })
        .collect()
}

fn sample_index(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

/// Fill every slot of a template under its control label. The prefix always
/// starts with marker 0 and receives the canonical closing marker after each
/// span, whatever token actually ended it.
pub fn decode_template(
    backend: &dyn GeneratorBackend,
    template: &MaskedTemplate,
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SpanFill>> {
    config.validate()?;
    let vocab = backend.vocab();
    let compiled = template.compile(vocab)?;
    let mut prefix = vec![compiled.start];
    let mut fills = Vec::with_capacity(template.slot_count());
    for k in 0..template.slot_count() {
        let mut span: Vec<String> = Vec::new();
        let mut truncated = false;
        loop {
            let dist =
                backend.step_distribution(template.control_label, &compiled.corrupted, &prefix)?;
            let token = match config.mode {
                DecodeMode::Greedy => argmax(&dist),
                DecodeMode::Nucleus { top_p, temperature } => {
                    sample_index(&nucleus_filter(&dist, top_p, temperature), rng)
                }
            };
            if vocab.is_marker(token) {
                break;
            }
            span.push(vocab.token(token).to_string());
            prefix.push(token);
            if span.len() >= config.max_span_tokens {
                truncated = true;
                break;
            }
        }
        prefix.push(vocab.marker_id(k + 1)?);
        fills.push(SpanFill {
            words: span,
            truncated,
        });
    }
    Ok(fills)
}

/// Decode counterfactual candidates for every template, every label other
/// than its origin, and every sample index. Each candidate draws from its own
/// seeded stream, so the output is byte-identical however the work is split
/// across threads.
pub fn generate_candidates(
    backend: &dyn GeneratorBackend,
    templates: &[MaskedTemplate],
    config: &DecodeConfig,
) -> Result<Vec<CounterfactualCandidate>> {
    config.validate()?;
    let per_template: Vec<Vec<CounterfactualCandidate>> = templates
        .par_iter()
        .map(|template| -> Result<Vec<CounterfactualCandidate>> {
            let mut out = Vec::new();
            for target in flipped_labels(backend.label_count(), template.control_label) {
                let retargeted = template.with_control(target);
                for sample in 0..config.num_samples {
                    let seed = derive_seed(
                        config.seed,
                        &[
                            "decode",
                            &template.origin_id,
                            &target.to_string(),
                            &sample.to_string(),
                        ],
                    );
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let fills = decode_template(backend, &retargeted, config, &mut rng)?;
                    let segments = template.reconstruct(
                        &fills.iter().map(|f| f.words.clone()).collect::<Vec<_>>(),
                    )?;
                    let degenerate = fills.iter().any(|f| f.words.is_empty())
                        || segments.iter().any(|s| s.is_empty());
                    let truncated = fills.iter().any(|f| f.truncated);
                    out.push(CounterfactualCandidate {
                        origin_id: template.origin_id.clone(),
                        origin_label: template.control_label,
                        target_label: target,
                        sample_index: sample,
                        segments,
                        filled_spans: fills,
                        degenerate,
                        truncated,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_template.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infill::testgen::ScriptedGenerator;
    use crate::infill::Slot;
    use crate::modelkit::GenVocab;

    fn vocab() -> GenVocab {
        GenVocab::build(2, ["ctx", "good", "bad"].into_iter())
    }

    fn spiked(v: usize, token: usize, p: f64) -> Vec<f64> {
        let rest = (1.0 - p) / (v as f64 - 1.0);
        (0..v).map(|i| if i == token { p } else { rest }).collect()
    }

    fn one_slot_template() -> MaskedTemplate {
        MaskedTemplate {
            origin_id: "t".into(),
            control_label: 0,
            words: vec!["ctx".into(), "<slot_0>".into()],
            word_segment: vec![0, 0],
            segment_count: 1,
            slots: vec![Slot {
                segment: 0,
                marker_index: 1,
                original_range: (1, 2),
            }],
            targets: vec![vec!["good".into()]],
        }
    }

    #[test]
    fn nucleus_filter_keeps_the_smallest_mass_reaching_top_p() {
        let filtered = nucleus_filter(&[0.5, 0.3, 0.15, 0.04, 0.01], 0.9, 1.0);
        let expected = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0, 0.0];
        for (got, want) in filtered.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{filtered:?}");
        }
    }

    #[test]
    fn nucleus_filter_with_full_mass_is_identity() {
        let dist = [0.5, 0.3, 0.15, 0.04, 0.01];
        let filtered = nucleus_filter(&dist, 1.0, 1.0);
        for (got, want) in filtered.iter().zip(dist) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn nucleus_filter_breaks_ties_toward_lower_index() {
        let filtered = nucleus_filter(&[0.4, 0.4, 0.2], 0.5, 1.0);
        assert!((filtered[0] - 0.5).abs() < 1e-12);
        assert!((filtered[1] - 0.5).abs() < 1e-12);
        assert_eq!(filtered[2], 0.0);
    }

    #[test]
    fn temperature_reshapes_before_truncation() {
        let filtered = nucleus_filter(&[0.5, 0.3, 0.15, 0.04, 0.01], 1.0, 0.5);
        // Squaring and renormalizing: 0.25 / 0.36425.
        let sum = 0.25 + 0.09 + 0.0225 + 0.0016 + 0.0001;
        assert!((filtered[0] - 0.25 / sum).abs() < 1e-12);
        let total: f64 = filtered.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_frequencies_match_the_filtered_distribution() {
        let filtered = nucleus_filter(&[0.5, 0.3, 0.15, 0.04, 0.01], 0.9, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            counts[sample_index(&filtered, &mut rng)] += 1;
        }
        let expected = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0, 0.0];
        for (count, want) in counts.iter().zip(expected) {
            let freq = *count as f64 / draws as f64;
            assert!(
                (freq - want).abs() < 0.01,
                "frequency {freq} expected {want}"
            );
        }
    }

    #[test]
    fn greedy_decode_picks_the_modal_tokens() {
        let vocab = vocab();
        let v = vocab.len();
        let gen = ScriptedGenerator {
            label_count: 2,
            table: vec![
                vec![
                    spiked(v, vocab.id("good"), 0.9),
                    spiked(v, vocab.marker_id(1).unwrap(), 0.9),
                ],
                vec![],
            ],
            vocab,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fills =
            decode_template(&gen, &one_slot_template(), &DecodeConfig::greedy(0), &mut rng)
                .unwrap();
        assert_eq!(fills.len(), 1);
        assert_eq!(fills[0].words, vec!["good"]);
        assert!(!fills[0].truncated);
    }

    #[test]
    fn any_marker_closes_the_span_and_the_canonical_one_is_recorded() {
        let vocab = vocab();
        let v = vocab.len();
        // After the first span token the model emits marker 0, not marker 1.
        // The span must close anyway and decoding must proceed to slot 1.
        let template = MaskedTemplate {
            origin_id: "t".into(),
            control_label: 0,
            words: vec!["<slot_0>".into(), "ctx".into(), "<slot_1>".into()],
            word_segment: vec![0, 0, 0],
            segment_count: 1,
            slots: vec![
                Slot {
                    segment: 0,
                    marker_index: 0,
                    original_range: (0, 1),
                },
                Slot {
                    segment: 0,
                    marker_index: 2,
                    original_range: (2, 3),
                },
            ],
            targets: vec![vec!["good".into()], vec!["bad".into()]],
        };
        let gen = ScriptedGenerator {
            label_count: 2,
            table: vec![
                vec![
                    spiked(v, vocab.id("good"), 0.9),
                    spiked(v, vocab.marker_id(0).unwrap(), 0.9),
                    spiked(v, vocab.id("bad"), 0.9),
                    spiked(v, vocab.marker_id(0).unwrap(), 0.9),
                ],
                vec![],
            ],
            vocab,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fills = decode_template(&gen, &template, &DecodeConfig::greedy(0), &mut rng).unwrap();
        assert_eq!(fills[0].words, vec!["good"]);
        assert_eq!(fills[1].words, vec!["bad"]);
        let rebuilt = template
            .reconstruct(&[fills[0].words.clone(), fills[1].words.clone()])
            .unwrap();
        assert_eq!(rebuilt, vec!["good ctx bad"]);
    }

    #[test]
    fn spans_truncate_at_the_token_cap() {
        let vocab = vocab();
        let v = vocab.len();
        let gen = ScriptedGenerator {
            label_count: 2,
            table: vec![vec![spiked(v, vocab.id("good"), 0.9)], vec![]],
            vocab,
        };
        let config = DecodeConfig {
            max_span_tokens: 3,
            ..DecodeConfig::greedy(0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fills = decode_template(&gen, &one_slot_template(), &config, &mut rng).unwrap();
        assert_eq!(fills[0].words.len(), 3);
        assert!(fills[0].truncated);
    }

    #[test]
    fn immediate_marker_yields_a_degenerate_candidate() {
        let vocab = vocab();
        let v = vocab.len();
        let gen = ScriptedGenerator {
            label_count: 2,
            table: vec![
                vec![],
                vec![spiked(v, vocab.marker_id(1).unwrap(), 0.9)],
            ],
            vocab,
        };
        let candidates =
            generate_candidates(&gen, &[one_slot_template()], &DecodeConfig::greedy(7)).unwrap();
        assert_eq!(candidates.len(), 1);
        assert!(candidates[0].degenerate);
        assert_eq!(candidates[0].target_label, 1);
        assert_eq!(candidates[0].segments, vec!["ctx"]);
    }

    #[test]
    fn candidate_generation_is_deterministic_and_covers_all_targets() {
        let vocab = vocab();
        let v = vocab.len();
        let spread: Vec<f64> = vec![1.0 / v as f64; v];
        let gen = ScriptedGenerator {
            label_count: 3,
            table: vec![vec![], vec![spread.clone()], vec![spread]],
            vocab,
        };
        let config = DecodeConfig {
            num_samples: 2,
            max_span_tokens: 4,
            ..DecodeConfig::nucleus(42)
        };
        let a = generate_candidates(&gen, &[one_slot_template()], &config).unwrap();
        let b = generate_candidates(&gen, &[one_slot_template()], &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let mut keys: Vec<(usize, usize)> =
            a.iter().map(|c| (c.target_label, c.sample_index)).collect();
        keys.sort_unstable();
        assert_eq!(keys, vec![(1, 0), (1, 1), (2, 0), (2, 1)]);
        for candidate in &a {
            assert_eq!(candidate.origin_label, 0);
            assert!(candidate.candidate_id().starts_with("t#cf"));
        }
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let mut config = DecodeConfig::nucleus(1);
        config.mode = DecodeMode::Nucleus {
            top_p: 1.5,
            temperature: 1.0,
        };
        assert!(config.validate().is_err());
        config.mode = DecodeMode::Nucleus {
            top_p: 0.9,
            temperature: 0.0,
        };
        assert!(config.validate().is_err());
        let mut config = DecodeConfig::greedy(1);
        config.max_span_tokens = 0;
        assert!(config.validate().is_err());
        config = DecodeConfig::greedy(1);
        config.num_samples = 0;
        assert!(config.validate().is_err());
    }
}
