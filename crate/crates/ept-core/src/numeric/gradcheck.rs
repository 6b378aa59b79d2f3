//! Central finite-difference gradient verification.

use crate::error::{EptError, Result};
use crate::numeric::Matrix;

/// Compare analytic gradients against central finite differences.
///
/// `eval` re-evaluates the scalar loss from a full parameter set; `params`
/// holds the point at which `analytic` was computed (one gradient matrix per
/// parameter, zero-filled for parameters the loss does not touch). Each
/// entry is perturbed by `+h` and `-h` in turn and the worst relative error
/// `|a - n| / max(1e-8, |a| + |n|)` over all entries is returned.
pub fn finite_diff_check<F>(
    mut eval: F,
    params: &[Matrix],
    analytic: &[Matrix],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(EptError::Parameter(format!("finite_diff_check: h must be > 0, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(EptError::Contract(format!(
            "finite_diff_check: {} parameters but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut work: Vec<Matrix> = params.to_vec();
    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        if params[pi].shape() != analytic[pi].shape() {
            return Err(EptError::Shape(format!(
                "finite_diff_check: parameter {pi} is {}x{} but gradient is {}x{}",
                params[pi].rows(),
                params[pi].cols(),
                analytic[pi].rows(),
                analytic[pi].cols()
            )));
        }
        for idx in 0..params[pi].len() {
            let base = params[pi].as_slice()[idx];
            work[pi].as_mut_slice()[idx] = base + h;
            let up = eval(&work)?;
            work[pi].as_mut_slice()[idx] = base - h;
            let down = eval(&work)?;
            work[pi].as_mut_slice()[idx] = base;
            if !up.is_finite() || !down.is_finite() {
                return Err(EptError::Numeric(format!(
                    "finite_diff_check: non-finite loss while probing parameter {pi} entry {idx}"
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].as_slice()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
