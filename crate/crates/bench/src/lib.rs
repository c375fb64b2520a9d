//! Seeded inputs shared by the benchmarks.

use cbamnet::data::synth_generate;
use cbamnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform values in [-1, 1].
pub fn uniform(dims: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid dims")
}

/// A batch of synthetic images with their labels.
pub fn image_batch(n: usize, size: usize, seed: u64) -> (Tensor, Tensor) {
    let ds = synth_generate(n, size, size, seed).expect("valid synthetic parameters");
    let indices: Vec<usize> = (0..n).collect();
    ds.batch(&indices).expect("indices in range")
}
