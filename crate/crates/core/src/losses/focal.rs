use super::{LossError, Result};
use crate::tensor::{sigmoid_scalar, Tape, Tensor};

/// Sigmoid focal loss parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Per-element focal terms of `N x K` logits, one binary term per class.
/// `targets[i]` is the class of prediction `i`, or `None` for background.
pub fn focal_terms(tape: &Tape, logits: &Tensor, targets: &[Option<usize>], p: FocalParams) -> Result<Tensor> {
    let (n, k) = match logits.shape() {
        &[n, k] => (n, k),
        s => return Err(LossError::Shape(format!("logits must be N x K, got {s:?}"))),
    };
    if targets.len() != n {
        return Err(LossError::Shape(format!("{} targets for {n} predictions", targets.len())));
    }
    let mut mask = vec![0.0; n * k];
    for (i, t) in targets.iter().enumerate() {
        if let Some(c) = *t {
            if c >= k {
                return Err(LossError::ClassOutOfRange { class: c, num_classes: k });
            }
            mask[i * k + c] = 1.0;
        }
    }
    let mask = Tensor::new(vec![n, k], mask)?;
    let neg_logits = tape.scale(logits, -1.0)?;
    let modulate = |t: &Tensor| -> crate::tensor::Result<Tensor> {
        if p.gamma == 0.0 {
            Ok(Tensor::full(vec![n, k], 1.0))
        } else if p.gamma == 2.0 {
            tape.mul(t, t)
        } else {
            tape.pow_scalar(t, p.gamma)
        }
    };
    // positive: -alpha (1-p)^gamma log p; negative: -(1-alpha) p^gamma log(1-p)
    let pos = tape.mul(&modulate(&tape.sigmoid(&neg_logits)?)?, &tape.log_sigmoid(logits)?)?;
    let neg = tape.mul(&modulate(&tape.sigmoid(logits)?)?, &tape.log_sigmoid(&neg_logits)?)?;
    let pos = tape.scale(&pos, -p.alpha)?;
    let neg = tape.scale(&neg, -(1.0 - p.alpha))?;
    let inv = Tensor::new(vec![n, k], mask.data().iter().map(|m| 1.0 - m).collect())?;
    Ok(tape.add(&tape.mul(&pos, &mask)?, &tape.mul(&neg, &inv)?)?)
}

/// Mean of [`focal_terms`] over all `N x K` entries.
pub fn focal_loss(tape: &Tape, logits: &Tensor, targets: &[Option<usize>], p: FocalParams) -> Result<Tensor> {
    Ok(tape.mean(&focal_terms(tape, logits, targets, p)?)?)
}

/// Matching cost of labeling a logit as positive: the positive focal term
/// minus the negative one.
pub fn focal_cost(logit: f64, p: FocalParams) -> f64 {
    let prob = sigmoid_scalar(logit);
    let log_p = -softplus(-logit);
    let log_1mp = -softplus(logit);
    let pos = -p.alpha * (1.0 - prob).powf(p.gamma) * log_p;
    let neg = -(1.0 - p.alpha) * prob.powf(p.gamma) * log_1mp;
    pos - neg
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
