//! Central finite differences, the reference for every reverse-mode check.

use crate::error::{Error, Result};

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)` for every coordinate `i`.
pub fn finite_difference_grad<E>(
    mut f: impl FnMut(&[f64]) -> std::result::Result<f64, E>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>>
where
    E: std::fmt::Display,
{
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("finite difference step must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe).map_err(|e| Error::NonFinite(format!("f(x+eps e_{i}): {e}")))?;
        probe[i] = orig - eps;
        let minus = f(&probe).map_err(|e| Error::NonFinite(format!("f(x-eps e_{i}): {e}")))?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f evaluated to {plus} / {minus} at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)` between two gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
