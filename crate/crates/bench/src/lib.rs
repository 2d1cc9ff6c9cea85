//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use tcens_core::Rng;

/// `rows x cols` matrix of standard normal draws.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = Rng::new(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.normal(0.0, 1.0))
}

/// Pixel-like inputs in `[0, 1)`.
pub fn pixel_batch(rows: usize, seed: u64) -> Array2<f64> {
    let mut rng = Rng::new(seed);
    Array2::from_shape_simple_fn((rows, 784), || rng.uniform(0.0, 1.0))
}
