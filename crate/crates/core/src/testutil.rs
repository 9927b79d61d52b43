//! Helpers shared by unit tests.

use alloc::vec::Vec;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut q = x.to_vec();
    (0..x.len())
        .map(|i| {
            q[i] = x[i] + h;
            let up = f(&q);
            q[i] = x[i] - h;
            let down = f(&q);
            q[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, the relative error of a whole gradient vector.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    libm::sqrt(diff) / libm::sqrt(na.max(nb)).max(1e-300)
}

/// Deterministic values in `[-1, 1)`.
pub fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_add(17);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}
