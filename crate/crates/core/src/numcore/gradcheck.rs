//! Central finite differences for checking reverse-mode gradients.

use super::matrix::Matrix;
use crate::error::Result;

/// Step used by every gradient check in this crate.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every entry of every
/// input matrix. `f` is evaluated `2 · Σ len` times.
pub fn numerical_gradient<F>(inputs: &[Matrix], step: f64, mut f: F) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    let mut work: Vec<Matrix> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = Matrix::zeros(inputs[p].rows(), inputs[p].cols());
        for k in 0..inputs[p].len() {
            let orig = inputs[p].as_slice()[k];
            work[p].as_mut_slice()[k] = orig + step;
            let plus = f(&work)?;
            work[p].as_mut_slice()[k] = orig - step;
            let minus = f(&work)?;
            work[p].as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Relative error between an analytic and a numerical gradient:
/// `max|a − n| / max(max|a|, max|n|, 1e-12)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-12);
    analytic.max_abs_diff(numeric) / scale
}
