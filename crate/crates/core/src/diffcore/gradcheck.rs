use alloc::format;

use crate::error::{Error, Result};
use crate::math;

/// Largest relative disagreement between an analytic gradient and central
/// differences of `f`, measured as `|analytic − fd| / (|analytic| + 1e-12)`.
///
/// `params` is perturbed in place one entry at a time and restored.
pub fn finite_diff_check<F>(mut f: F, params: &mut [f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-8..=1e-3).contains(&step) {
        return Err(Error::Config(format!("finite-difference step {step} outside [1e-8, 1e-3]")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} analytic entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let original = params[i];
        params[i] = original + step;
        let plus = f(params);
        params[i] = original - step;
        let minus = f(params);
        params[i] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("non-finite objective when perturbing entry {i}")));
        }
        let fd = (plus - minus) / (2.0 * step);
        let rel = math::abs(analytic[i] - fd) / (math::abs(analytic[i]) + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
