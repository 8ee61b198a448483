use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Absolute floor when comparing tape and finite-difference gradients.
pub const GRAD_ABS_TOL: f64 = 1e-6;
/// Relative tolerance when comparing tape and finite-difference gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
///
/// Fails if `h` is not a positive finite number or if any evaluation of `f`
/// is non-finite.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Arithmetic(format!(
                "non-finite evaluation around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// True when every pair agrees within `max(abs_tol, rel_tol·max(|a|,|b|))`.
pub fn gradients_agree(a: &[f64], b: &[f64], abs_tol: f64, rel_tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let scale = x.abs().max(y.abs());
            (x - y).abs() <= abs_tol.max(rel_tol * scale)
        })
}
