//! Finite-difference gradient verification.
//!
//! The checker evaluates the function being tested as a black box, so it
//! stays independent of the analytic backward paths it validates.

/// Central finite differences of a scalar-valued function at `x0`.
pub fn central_diff<F>(mut f: F, x0: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between an analytic gradient and its
/// finite-difference estimate: `|a - n| / max(|a|, |n|)`, with disagreements
/// below an absolute floor of 1e-7 ignored as finite-difference noise.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        if diff <= 1e-7 {
            continue;
        }
        let rel = diff / a.abs().max(n.abs());
        worst = worst.max(rel);
    }
    worst
}
