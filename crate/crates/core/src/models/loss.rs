//! Class-weighted binary negative log likelihood.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Probabilities are clamped to `[ε, 1-ε]` before taking logarithms.
pub const NLL_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pos: f64,
    pub neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pos: 1.0, neg: 1.0 }
    }
}

impl LossWeights {
    fn check(&self) -> Result<(), ModelError> {
        if !(self.pos > 0.0 && self.neg > 0.0 && self.pos.is_finite() && self.neg.is_finite()) {
            return Err(ModelError::InvalidWeights {
                pos: self.pos,
                neg: self.neg,
            });
        }
        Ok(())
    }
}

/// Inverse class frequency normalized to a mean weight of one:
/// `w_pos = N / (2·N_pos)`, `w_neg = N / (2·N_neg)`. Degenerate counts fall
/// back to unit weights.
pub fn class_balance_weights(positives: usize, total: usize) -> LossWeights {
    let negatives = total.saturating_sub(positives);
    if positives == 0 || negatives == 0 {
        return LossWeights::default();
    }
    let n = total as f64;
    LossWeights {
        pos: n / (2.0 * positives as f64),
        neg: n / (2.0 * negatives as f64),
    }
}

fn channel_weights(scores: &Tensor, weights: &[LossWeights]) -> Result<(Tensor, Tensor), ModelError> {
    let c = scores.dim(D::Minus1)?;
    if c != weights.len() {
        return Err(ModelError::Shape(format!(
            "{c} output channels but {} loss weights",
            weights.len()
        )));
    }
    for w in weights {
        w.check()?;
    }
    let dev = scores.device();
    let pos = Tensor::from_vec(weights.iter().map(|w| w.pos).collect::<Vec<_>>(), c, dev)?.to_dtype(scores.dtype())?;
    let neg = Tensor::from_vec(weights.iter().map(|w| w.neg).collect::<Vec<_>>(), c, dev)?.to_dtype(scores.dtype())?;
    Ok((pos, neg))
}

fn masked_mean(per_entry: &Tensor, mask: &Tensor) -> Result<Tensor, ModelError> {
    let c = per_entry.dim(D::Minus1)?;
    if mask.dims() != &per_entry.dims()[..per_entry.rank() - 1] {
        return Err(ModelError::Shape(format!(
            "mask {:?} does not match scores {:?}",
            mask.dims(),
            per_entry.dims()
        )));
    }
    let masked = per_entry.broadcast_mul(&mask.unsqueeze(D::Minus1)?)?;
    let count = (mask.sum_all()? * c as f64)?;
    // An all-masked batch contributes zero rather than NaN.
    let count = count.maximum(1.0)?;
    Ok(masked.sum_all()?.div(&count)?)
}

/// Mean over unmasked positions and channels of
/// `−[w_pos·y·log p + w_neg·(1−y)·log(1−p)]`.
///
/// `probs` and `targets` share a shape whose last dimension holds one
/// channel per entry of `weights`; `mask` has the shape without that last
/// dimension.
pub fn weighted_nll_loss(
    probs: &Tensor,
    targets: &Tensor,
    mask: &Tensor,
    weights: &[LossWeights],
) -> Result<Tensor, ModelError> {
    if probs.dims() != targets.dims() {
        return Err(ModelError::Shape(format!(
            "scores {:?} vs targets {:?}",
            probs.dims(),
            targets.dims()
        )));
    }
    let (w_pos, w_neg) = channel_weights(probs, weights)?;
    let p = probs.clamp(NLL_EPSILON, 1.0 - NLL_EPSILON)?;
    let pos = targets.mul(&p.log()?)?.broadcast_mul(&w_pos)?;
    let neg = (1.0 - targets)?.mul(&(1.0 - &p)?.log()?)?.broadcast_mul(&w_neg)?;
    masked_mean(&(pos + neg)?.neg()?, mask)
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

/// The same loss evaluated on logits `z` with `p = σ(z)`; numerically stable
/// for saturated outputs and used for training.
pub fn weighted_bce_with_logits(
    logits: &Tensor,
    targets: &Tensor,
    mask: &Tensor,
    weights: &[LossWeights],
) -> Result<Tensor, ModelError> {
    if logits.dims() != targets.dims() {
        return Err(ModelError::Shape(format!(
            "scores {:?} vs targets {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    let (w_pos, w_neg) = channel_weights(logits, weights)?;
    let pos = targets.mul(&softplus(&logits.neg()?)?)?.broadcast_mul(&w_pos)?;
    let neg = (1.0 - targets)?.mul(&softplus(logits)?)?.broadcast_mul(&w_neg)?;
    masked_mean(&(pos + neg)?, mask)
}
