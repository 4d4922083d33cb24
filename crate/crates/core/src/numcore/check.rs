//! Central finite differences, used as an independent oracle for gradients.

use super::Tensor;

/// Step used by every gradient check in this crate.
pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` with respect to element `index` of `inputs[which]`.
pub fn central_difference<F>(f: &mut F, inputs: &[Tensor], which: usize, index: usize, h: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[index] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[index] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with an absolute floor so that near-zero gradients do not
/// blow the ratio up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
