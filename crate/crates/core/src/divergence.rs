//! KL divergence between class distributions given as logits.

use crate::numerics::{Scalar, Tensor, Var};
use crate::Result;

/// `KL(softmax(reference) || softmax(logits))` per row, in nats.
///
/// The reference is a constant; gradients flow only into `logits`.
pub fn kl_rows<'t, T: Scalar>(reference: &Tensor<T>, logits: Var<'t, T>) -> Result<Var<'t, T>> {
    let tape = logits.tape();
    let r = tape.constant(reference.clone());
    let log_p = r.log_softmax()?;
    let p = tape.constant(log_p.value().map(|v| v.exp()));
    let log_q = logits.log_softmax()?;
    Ok(p.mul(log_p.sub(log_q)?)?.sum_last()?)
}

/// `KL(softmax(reference) || softmax(logits))` for one pair of logit rows.
pub fn kl_from_logits<T: Scalar>(reference: &[T], logits: &[T]) -> f64 {
    let log_p = log_softmax(reference);
    let log_q = log_softmax(logits);
    log_p
        .iter()
        .zip(&log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

/// KL between two probability vectors.
pub fn kl_probs(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

fn log_softmax<T: Scalar>(x: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    xs.iter().map(|v| v - lse).collect()
}
