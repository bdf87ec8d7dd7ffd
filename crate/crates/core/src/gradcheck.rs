//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Absolute floor under the relative-error denominator, so coordinates whose
/// true gradient is essentially zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Estimates `∂f/∂x_i ≈ (f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, point: &NdArray, epsilon: f64) -> Result<NdArray>
where
    F: FnMut(&NdArray) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut grad = NdArray::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + epsilon;
        let plus = f(&probe)?;
        probe.data_mut()[i] = x - epsilon;
        let minus = f(&probe)?;
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Largest per-coordinate relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &NdArray, numeric: &NdArray) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}
