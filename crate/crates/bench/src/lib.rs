//! Seeded inputs shared by the benchmarks.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specalign::ops;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `(rows, dim)` standard normal embeddings in f64.
pub fn embeddings(seed: u64, rows: usize, dim: usize) -> Array2<f64> {
    ops::normal(&mut rng(seed), rows, dim, 1.0).mapv(f64::from)
}

/// `count` single-band `(1, size, size)` images.
pub fn band_images(seed: u64, count: usize, size: usize) -> Vec<Array3<f32>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            ops::normal(&mut r, size, size, 1.0)
                .into_shape_with_order((1, size, size))
                .unwrap()
        })
        .collect()
}
