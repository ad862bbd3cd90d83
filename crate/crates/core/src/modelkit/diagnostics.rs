//! Finite-difference cross-checks for the analytic gradients. These walk the
//! public loss interfaces, so agreement means the training code and the loss
//! definitions describe the same function.

use crate::corpus::TokenizedText;
use crate::error::Result;
use crate::infill::{total_loss, MaskedTemplate};
use crate::modelkit::{
    ClassifierBackend, InfillObjective, ReferenceClassifier, ReferenceGenerator,
};

/// Central-difference estimate of d logit(label) / d e_i for every subtoken
/// position. Positions are differentiated by perturbing the embedding row of
/// the token at that position, so texts whose positions share a token will
/// see the row's combined effect; use distinct tokens when exactness matters.
pub fn fd_embedding_gradients(
    classifier: &ReferenceClassifier,
    label: usize,
    text: &TokenizedText,
    epsilon: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut probe = classifier.clone();
    let dim = classifier.embedding_dim();
    let mut out = Vec::with_capacity(text.n());
    for subtoken in &text.subtokens {
        let token_id = probe.token_id(subtoken);
        let mut row = Vec::with_capacity(dim);
        for d in 0..dim {
            probe.perturb_embedding(token_id, d, epsilon);
            let plus = probe.logit(label, text)?;
            probe.perturb_embedding(token_id, d, -2.0 * epsilon);
            let minus = probe.logit(label, text)?;
            probe.perturb_embedding(token_id, d, epsilon);
            row.push((plus - minus) / (2.0 * epsilon));
        }
        out.push(row);
    }
    Ok(out)
}

/// Central-difference estimate of the full objective's gradient over every
/// generator parameter, flattened in the same order as
/// `ReferenceGenerator::loss_gradient`.
pub fn fd_generator_gradient(
    generator: &ReferenceGenerator,
    template: &MaskedTemplate,
    objective: &InfillObjective,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let mut probe = generator.clone();
    let count = generator.parameter_count();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        *probe.parameter_mut(i) += epsilon;
        let plus = total_loss(&probe, template, objective)?;
        *probe.parameter_mut(i) -= 2.0 * epsilon;
        let minus = total_loss(&probe, template, objective)?;
        *probe.parameter_mut(i) += epsilon;
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}
