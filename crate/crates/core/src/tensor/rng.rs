//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), whose
//! output stream is specified bit-for-bit and does not depend on platform
//! endianness or word size. Independent streams are derived from a base seed
//! with [`split_seed`], a SplitMix64 finalizer over `seed ⊕ stream·φ`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Scalar, Tensor};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives the seed of an independent stream. Deterministic and documented:
/// SplitMix64 applied to `seed ^ (stream · 0x9E3779B97F4A7C15)`.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `N(0, std²)` samples of the given shape. Draws are made in f64 and
/// rounded, so f32 and f64 tensors from the same seed agree to f32 precision.
pub fn normal_tensor<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(z * std)
    })
}

/// Uniform draw in `[0, 1)`.
pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}
