use super::ModelError;
use crate::gradcore::{Tensor, Var};

pub const DICE_SMOOTH: f64 = 1.0;

/// Smoothed soft Dice loss, computed per sample and averaged over the batch.
/// `target` holds 0/1 values with the shape of `pred`.
pub fn dice_loss<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>, ModelError> {
    let inter = pred.mul(target)?.sum_per_sample()?;
    let denom = pred.sum_per_sample()?.add(target.sum_per_sample()?)?.add_scalar(DICE_SMOOTH)?;
    let ratio = inter.scale(2.0)?.add_scalar(DICE_SMOOTH)?.div(denom, 0.0)?;
    Ok(ratio.mean()?.neg()?.add_scalar(1.0)?)
}

/// Cross-entropy weighted per sample by the weight of its true class and
/// normalized by the sum of applied weights.
pub fn weighted_ce<'g>(logits: Var<'g>, labels: &[usize], weights: &[f64]) -> Result<Var<'g>, ModelError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(ModelError::Size { what: "labels", expected: s[0], got: labels.len() });
    }
    let c = s[1];
    if weights.len() != c {
        return Err(ModelError::Size { what: "class weights", expected: c, got: weights.len() });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(ModelError::LabelOutOfRange { label, classes: c });
    }
    let total: f64 = labels.iter().map(|&l| weights[l]).sum();
    let mut m = vec![0.0; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        m[i * c + l] = weights[l] / total;
    }
    let m = logits.graph().constant(Tensor::new(vec![labels.len(), c], m)?);
    Ok(logits.log_softmax()?.mul(m)?.sum()?.neg()?)
}

/// Batch mean of `‖h_tirads − target‖²`.
pub fn clin_loss<'g>(h_tirads: Var<'g>, target: Var<'g>) -> Result<Var<'g>, ModelError> {
    let b = h_tirads.shape()[0];
    Ok(h_tirads.sub(target)?.square()?.sum()?.scale(1.0 / b as f64)?)
}
