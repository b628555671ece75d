use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares an analytic gradient against central differences of `f` at
/// `point`. Returns the largest `|a - n| / max(|a|, |n|, 1e-8)` over all
/// coordinates.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if point.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "grad_check: point has {} coordinates, gradient has {}",
            point.len(),
            analytic.len()
        )));
    }
    let mut p = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let hi = f(&p)?;
        p[i] = orig - eps;
        let lo = f(&p)?;
        p[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric {
                op: format!("grad_check at coordinate {i}"),
            });
        }
        let numeric = (hi - lo) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
