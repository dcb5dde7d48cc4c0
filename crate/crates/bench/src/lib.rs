//! Fixtures shared by the benchmarks.

use rand::Rng as _;

use declineforge_core::rng;
use declineforge_core::{Tensor, N_CLASSES};

/// Random-walk series of the given length.
pub fn series(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    let mut x = 0.0;
    (0..len)
        .map(|_| {
            x += rng.random_range(-1.0..1.0);
            x
        })
        .collect()
}

/// Rows whose first feature carries the class, the rest noise.
pub fn classification(n: usize, features: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = rng::seeded(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % N_CLASSES).collect();
    let rows = labels
        .iter()
        .map(|&c| {
            (0..features)
                .map(|j| if j == 0 { c as f64 } else { 0.0 } + rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    (rows, labels)
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}
