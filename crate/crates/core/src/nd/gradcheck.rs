//! Central finite differences, used as an oracle for the tape's gradients.

use crate::error::Result;
use crate::nd::Tensor;

/// Numerical gradient of `f` with respect to every entry of every tensor in
/// `params`, by central differences with the given `step`. `f` must not
/// consume randomness that differs between calls.
pub fn numerical_grads<F>(params: &mut [Tensor<f64>], step: f64, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + step;
            let plus = f(params)?;
            params[p].data_mut()[i] = orig - step;
            let minus = f(params)?;
            params[p].data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all entries. The floor keeps
/// gradients that are zero up to rounding from dominating the ratio.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Floor used with [`max_relative_error`] throughout the test suites.
pub const RELATIVE_FLOOR: f64 = 1e-3;
