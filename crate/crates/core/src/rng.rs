//! Keyed, order-independent random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! hash of a tuple of integers (run seed, purpose tag, step, sample index…),
//! so results never depend on call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type KeyedRng = ChaCha8Rng;

/// Purpose tags keep streams for different consumers disjoint.
pub mod stream {
    pub const INIT: u64 = 0x1001;
    pub const TEMPLATES: u64 = 0x1002;
    pub const SPLIT: u64 = 0x1003;
    pub const TEXTURE: u64 = 0x1004;
    pub const SHUFFLE: u64 = 0x1005;
    pub const AUGMENT: u64 = 0x1006;
    pub const LIPSUM: u64 = 0x1007;
    pub const CONTEXT: u64 = 0x1008;
    pub const DIRECTION: u64 = 0x1009;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into one 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn keyed(parts: &[u64]) -> KeyedRng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}
