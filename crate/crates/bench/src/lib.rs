//! Fixtures shared by the kernel benchmarks.

use bitrobust_core::ndarray::Array2;
use bitrobust_core::rng::{splitmix_at, unit_f64};
use bitrobust_core::{Architecture, Model};

/// The 784-256-128-10 classifier used by the experiments.
pub fn desk_model(seed: u64) -> Model {
    Model::init(Architecture::new(vec![784, 256, 128, 10]).expect("valid dims"), seed)
}

/// `n` pseudo-random values in `[-1, 1)`.
pub fn weights(n: usize, seed: u64) -> Vec<f64> {
    (0..n as u64)
        .map(|i| 2.0 * unit_f64(splitmix_at(seed, i)) - 1.0)
        .collect()
}

/// `rows` pseudo-random images of `dim` pixels in `[0, 1)`.
pub fn images(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let px = (0..(rows * dim) as u64)
        .map(|i| unit_f64(splitmix_at(seed, i)))
        .collect();
    Array2::from_shape_vec((rows, dim), px).expect("sized above")
}
