//! Seeded randomness. Every generator in the crate draws from ChaCha20 so
//! datasets are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Rng = ChaCha20Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for item `index` of stream `stream`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}
