//! Seed derivation and seeded random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by a
//! seed derived from a base seed and a path of indices (run, step, sample),
//! so any stage can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Real;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each element of `path` in order.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `len` standard-normal draws from the stream keyed by `seed`.
pub fn normal_vec<T: Real>(seed: u64, len: usize) -> Vec<T> {
    let mut r = rng(seed);
    (0..len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut r);
            T::lit(v)
        })
        .collect()
}
