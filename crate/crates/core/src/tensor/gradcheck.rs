//! Central finite differences, the independent oracle used to verify every
//! gradient rule on the tape.
//!
//! The oracle never touches the reverse sweep: it re-runs the forward pass
//! with one input element nudged by `±step` and differences the results.

use rayon::prelude::*;

/// Step used throughout the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Relative error floor: differences are measured against
/// `max(FLOOR, |a| + |n|)` so near-zero gradients are compared absolutely
/// instead of amplifying finite-difference noise.
pub const REL_FLOOR: f64 = 1e-4;

/// Central-difference gradient of `f` at `x0`. `f` must be a pure function
/// of its argument; probes run in parallel on independent copies.
pub fn central_diff<F>(x0: &[f64], step: f64, f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..x0.len())
        .into_par_iter()
        .map(|i| {
            let mut plus = x0.to_vec();
            let mut minus = x0.to_vec();
            plus[i] += step;
            minus[i] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
        .collect()
}

/// Worst relative disagreement between analytic and numeric gradients.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / REL_FLOOR.max(a.abs() + n.abs()))
        .fold(0.0, f64::max)
}
