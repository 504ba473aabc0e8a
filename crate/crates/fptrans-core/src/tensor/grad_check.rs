//! Finite-difference gradient oracle.
//!
//! The oracle only ever calls the supplied closure, so it stays independent
//! of whatever analytic backward rule it is checking.

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every
/// coordinate of `x`.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    assert!(h > 0.0, "step size must be positive");
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Elementwise relative error with an absolute floor, the usual gradient
/// check metric: |a - b| / max(|a|, |b|, floor).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
