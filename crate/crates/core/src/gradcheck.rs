//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward function, so it is independent
//! of any backward rule under test.

/// Central difference step used throughout the test suites.
pub const STEP: f64 = 1e-6;

/// Numeric gradient of `f` at `x` by central differences.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - n|_2 / max(|a|_2, |n|_2)`, with a tiny floor so two zero vectors
/// compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}
