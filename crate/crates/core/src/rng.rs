//! Seed derivation. Every consumer of randomness gets its own ChaCha stream
//! derived from `(seed, stream, index)` so that adding a consumer never
//! perturbs another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod streams {
    pub const INIT_ENCODER: u64 = 1;
    pub const INIT_HEAD: u64 = 2;
    pub const INIT_CLASSIFIER: u64 = 3;
    pub const SHUFFLE: u64 = 10;
    pub const RHO: u64 = 11;
    pub const MASK: u64 = 12;
    pub const BOTH_SLOT: u64 = 13;
    pub const SCENE: u64 = 20;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
