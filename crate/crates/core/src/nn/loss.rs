//! Smoothed Dice loss.

use super::Tensor;
use crate::error::{Error, Result};

/// Smoothed Dice coefficient `E = (2*sum(P*T) + S) / (sum(T) + sum(P) + S)`
/// and its gradient with respect to the prediction `P`.
///
/// Training minimizes `1 - E`. `T` must be binary, `P` in [0, 1].
pub fn dice_loss(p: &Tensor, t: &Tensor, smooth: f64) -> Result<(f64, Tensor)> {
    if p.dims() != t.dims() {
        return Err(Error::Dims(format!(
            "dice_loss shape mismatch: {:?} vs {:?}",
            p.dims(),
            t.dims()
        )));
    }
    let mut inter = 0.0f64;
    let mut sum_p = 0.0f64;
    let mut sum_t = 0.0f64;
    for (&pv, &tv) in p.values().iter().zip(t.values()) {
        inter += pv * tv;
        sum_p += pv;
        sum_t += tv;
    }
    let num = 2.0 * inter + smooth;
    let den = sum_t + sum_p + smooth;
    let e = num / den;
    // dE/dP_i = (2*T_i*den - num) / den^2
    let den2 = den * den;
    let grad: Vec<f64> = t.values().iter().map(|&tv| (2.0 * tv * den - num) / den2).collect();
    Ok((e, Tensor::new(p.dims().to_vec(), grad)?))
}
