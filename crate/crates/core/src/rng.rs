//! Seeded random streams. Every stochastic routine takes an explicit seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

pub type DamRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from `seed` and a stream label.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.sample::<f64, _>(StandardNormal)))
}

pub fn normal_scalar(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}
