//! Seeded randomness. Every stochastic path in the crate draws from a
//! caller-owned `ChaCha8Rng` so runs are reproducible bit-for-bit.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> SeededRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal_array<R: Rng + ?Sized>(rng: &mut R, dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_vec(dim, normal_vec(rng, dim.0 * dim.1)).expect("shape matches length")
}
