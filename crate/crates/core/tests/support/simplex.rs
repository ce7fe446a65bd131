//! Numeric integration over the probability simplex for J = 2 and J = 3.
//!
//! Normalizing constants are integrated numerically as well, so nothing here
//! touches gamma-family functions.

use std::f64::consts::PI;

/// Nodes and weights on (0, 1) from the map `x = (1 - cos(pi s)) / 2` with a
/// midpoint rule in `s`; nodes cluster at both ends where the log
/// singularities live.
fn nodes(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) / n as f64;
            let x = 0.5 * (1.0 - (PI * s).cos());
            let w = 0.5 * PI * (PI * s).sin() / n as f64;
            (x, w)
        })
        .collect()
}

/// Quadrature points on the simplex as `(p, weight)`.
fn simplex_points(dim: usize, n: usize) -> Vec<(Vec<f64>, f64)> {
    let q = nodes(n);
    match dim {
        2 => q.iter().map(|&(x, w)| (vec![x, 1.0 - x], w)).collect(),
        3 => {
            let mut pts = Vec::with_capacity(n * n);
            for &(x, wx) in &q {
                for &(t, wt) in &q {
                    let p = vec![x, (1.0 - x) * t, (1.0 - x) * (1.0 - t)];
                    pts.push((p, wx * wt * (1.0 - x)));
                }
            }
            pts
        }
        _ => panic!("quadrature only for J = 2 or 3"),
    }
}

fn log_kernel(alpha: &[f64], p: &[f64]) -> f64 {
    alpha.iter().zip(p).map(|(a, x)| (a - 1.0) * x.ln()).sum()
}

/// `E_{p ~ Dir(alpha)}[-ln p_target]` by quadrature.
pub fn expected_cross_entropy(alpha: &[f64], target: usize, n: usize) -> f64 {
    let pts = simplex_points(alpha.len(), n);
    let (mut z, mut acc) = (0.0, 0.0);
    for (p, w) in &pts {
        let f = log_kernel(alpha, p).exp();
        z += w * f;
        acc += w * f * -p[target].ln();
    }
    acc / z
}

/// `KL[Dir(alpha) || Dir(1)]` by quadrature.
pub fn kl_to_uniform(alpha: &[f64], n: usize) -> f64 {
    let pts = simplex_points(alpha.len(), n);
    let volume: f64 = pts.iter().map(|(_, w)| w).sum();
    let z: f64 = pts.iter().map(|(p, w)| w * log_kernel(alpha, p).exp()).sum();
    let (ln_z, ln_uniform) = (z.ln(), -volume.ln());
    pts.iter()
        .map(|(p, w)| {
            let ln_f = log_kernel(alpha, p) - ln_z;
            w * ln_f.exp() * (ln_f - ln_uniform)
        })
        .sum()
}
