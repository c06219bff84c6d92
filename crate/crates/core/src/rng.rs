//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng` seeded
//! from a value produced here, so runs are reproducible from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer; a bijection on `u64`.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a stream label into an independent seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(root) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_from(root: u64, stream: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream))
}
