//! Training objective values computed through the public generator
//! interface. The trainer keeps its own analytic gradients; these functions
//! are the reference for what the numbers mean, and the gradient code is
//! checked against them by finite differences.

use crate::error::{Error, Result};
use crate::infill::{flipped_labels, MaskedTemplate};
use crate::modelkit::{clamp_prob, GeneratorBackend};

/// Negative log-likelihood of the template's target sequence under its
/// control label, summed over span tokens and the markers that close each
/// span.
pub fn mle_loss(backend: &dyn GeneratorBackend, template: &MaskedTemplate) -> Result<f64> {
    let compiled = template.compile(backend.vocab())?;
    let mut prefix = vec![compiled.start];
    let mut total = 0.0;
    for step in &compiled.steps {
        let dist =
            backend.step_distribution(template.control_label, &compiled.corrupted, &prefix)?;
        total -= clamp_prob(dist[step.token]).ln();
        prefix.push(step.token);
    }
    Ok(total)
}

/// Unlikelihood of the template's span tokens under every label other than
/// the control: -log(1 - P(token)) summed over span positions and flipped
/// labels. Closing markers are exempt, they end spans under any label.
pub fn unlikelihood_loss(backend: &dyn GeneratorBackend, template: &MaskedTemplate) -> Result<f64> {
    let compiled = template.compile(backend.vocab())?;
    let mut total = 0.0;
    for flipped in flipped_labels(backend.label_count(), template.control_label) {
        let mut prefix = vec![compiled.start];
        for step in &compiled.steps {
            if step.span_token {
                let dist = backend.step_distribution(flipped, &compiled.corrupted, &prefix)?;
                total -= (1.0 - clamp_prob(dist[step.token])).ln();
            }
            prefix.push(step.token);
        }
    }
    Ok(total)
}

/// The full objective: likelihood under the gold control plus `alpha` times
/// the unlikelihood under flipped controls. With `alpha` zero the flipped
/// passes are skipped entirely.
pub fn total_loss(
    backend: &dyn GeneratorBackend,
    template: &MaskedTemplate,
    objective: &crate::modelkit::InfillObjective,
) -> Result<f64> {
    objective.validate()?;
    let mle = mle_loss(backend, template)?;
    if objective.alpha == 0.0 {
        return Ok(mle);
    }
    Ok(mle + objective.alpha * unlikelihood_loss(backend, template)?)
}

/// Perplexity of the target sequences, pooled over templates: the
/// exponential of the mean per-step negative log-likelihood.
pub fn perplexity(backend: &dyn GeneratorBackend, templates: &[MaskedTemplate]) -> Result<f64> {
    if templates.is_empty() {
        return Err(Error::InsufficientData(
            "perplexity needs at least one template".into(),
        ));
    }
    let mut nll = 0.0;
    let mut steps = 0usize;
    for template in templates {
        nll += mle_loss(backend, template)?;
        steps += template.compile(backend.vocab())?.steps.len();
    }
    Ok((nll / steps as f64).exp())
}
