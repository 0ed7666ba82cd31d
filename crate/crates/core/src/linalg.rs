//! Small dense helpers shared by the solver modules.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Pairwise summation; fixed split order, so results are reproducible
/// independent of how the terms were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Geometric grid with `count` points from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > 0.0 && count >= 1);
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| {
            if k == 0 {
                lo
            } else if k == count - 1 {
                hi
            } else {
                (a + (b - a) * k as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

/// Uniformly distributed unit vector in R^n from a fixed seed.
pub fn uniform_sphere(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: DVector<f64> = DVector::from_iterator(n, (0..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

/// Spectral norm ‖m‖₂ (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

pub(crate) fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|j| (0..n).all(|i| i == j || m[(i, j)] == 0.0))
}

pub(crate) fn is_lower_triangular(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|j| (0..j).all(|i| m[(i, j)] == 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_are_exact() {
        let g = geometric_grid(1e-6, 1e3, 25);
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], 1e-6);
        assert_eq!(g[24], 1e3);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sphere_is_unit_and_seeded() {
        let a = uniform_sphere(50, 3);
        let b = uniform_sphere(50, 3);
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-14);
        assert_ne!(a, uniform_sphere(50, 4));
    }

    #[test]
    fn pairwise_matches_naive_sum() {
        let xs: Vec<f64> = (1..=1000).map(|k| 1.0 / k as f64).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-12);
    }
}
