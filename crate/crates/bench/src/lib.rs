//! Input builders shared by the benchmarks.

use fcos::fusion::{distance_matrix, DistanceMatrix, Metric};
use fcos::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[batch, 2, length]` input.
pub fn signal_batch(batch: usize, length: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * 2 * length).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![batch, 2, length], data).expect("shape matches")
}

/// Cosine distances between `m` random vectors of dimension `dim`.
pub fn random_distances(m: usize, dim: usize, seed: u64) -> DistanceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    distance_matrix(&vectors, Metric::Cosine)
}
