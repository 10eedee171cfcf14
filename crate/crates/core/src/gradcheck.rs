//! Finite-difference gradient checking.
//!
//! All checks run in f64: central differences in f32 lose too many digits
//! to distinguish a subtly wrong backward pass from rounding noise.

use crate::error::{Result, SlakError};

/// Central-difference gradient of a scalar function at `x`.
///
/// `eps` is the absolute step; a good default for unit-scale inputs is
/// around 1e-5 (error is O(eps^2) with ~1e-11 cancellation floor).
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let mut xs = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let fp = f(&xs);
        xs[i] = orig - eps;
        let fm = f(&xs);
        xs[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Compare an analytic gradient against central differences.
///
/// Error metric is |a - n| / max(|a|, |n|, floor); the first index whose
/// error exceeds `tol` is reported. `location` names the operation under
/// check in the error message.
pub fn check_grad(
    location: &str,
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
    floor: f64,
) -> Result<f64> {
    if analytic.len() != x.len() {
        return Err(SlakError::numeric(
            location,
            format!(
                "gradient length {} does not match input length {}",
                analytic.len(),
                x.len()
            ),
        ));
    }
    let numeric = finite_diff_grad(f, x, eps);
    let mut worst = 0.0f64;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > tol {
            return Err(SlakError::numeric(
                location,
                format!(
                    "gradient mismatch at flat index {i}: analytic {a:.9e}, numeric {n:.9e}, rel err {err:.3e} > tol {tol:.1e}"
                ),
            ));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
