//! Finite-difference gradient checking.
//!
//! The checker only ever calls a forward closure, so it is an independent
//! oracle for the hand-written backward passes: no code is shared with them.

/// Central differences: d f / d x[i] ≈ (f(x + h e_i) - f(x - h e_i)) / 2h.
/// The closure is handed a scratch copy of `x` with one coordinate nudged.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut scratch = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = scratch[i];
        scratch[i] = orig + h;
        let plus = f(&scratch);
        scratch[i] = orig - h;
        let minus = f(&scratch);
        scratch[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor so near-zero gradients are compared
/// absolutely instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error over two gradient vectors of equal length.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
