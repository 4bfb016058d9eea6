//! Seeded fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform covariates on [-1, 1] with a smooth response in the first two columns.
pub fn regression_fixture(n: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
    let y = x
        .outer_iter()
        .map(|r| (2.0_f64 * r[0]).sin() + r[1.min(dim - 1)] * r[0] + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    (x, y)
}

/// Positive bandwidth vector with a few large entries and many small ones.
pub fn bandwidth_fixture(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|v| if v < 3 { rng.random_range(0.5..2.0) } else { rng.random_range(0.0..0.05) }).collect()
}
