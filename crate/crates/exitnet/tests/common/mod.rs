//! Shared test oracles: central finite differences for gradient checking.
//!
//! The oracle only ever calls forward code, so it stays independent of the
//! analytic backward implementations it verifies.

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f32]) -> f64, x: &[f32], step: f32) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + step;
        let plus = f(&probe);
        probe[i] = original - step;
        let minus = f(&probe);
        probe[i] = original;
        grad.push((plus - minus) / (2.0 * step as f64));
    }
    grad
}

/// Max relative error between analytic and numeric gradients, with a floor so
/// near-zero entries are compared absolutely.
pub fn max_rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a as f64;
        let denom = a.abs().max(n.abs()).max(0.1);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Distinct, well-separated values in [-1, 1] in seeded random order; keeps
/// finite differences meaningful for piecewise-linear layers (ReLU kinks,
/// max-pool argmax switches).
pub fn spaced_values(n: usize, rng: &mut impl rand::Rng) -> Vec<f32> {
    let mut values: Vec<f32> = (0..n)
        .map(|i| -1.0 + 2.0 * (i as f32 + 0.5) / n as f32)
        .map(|v| if v.abs() < 0.02 { v + 0.05 } else { v })
        .collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        values.swap(i, j);
    }
    values
}
