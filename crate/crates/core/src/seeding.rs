//! Named, index-derived random streams.
//!
//! Every stochastic component draws from a ChaCha stream whose seed is a
//! mix of a user seed, a stream tag and an index, so that results do not
//! depend on consumption order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Distinct tags give statistically independent streams from
/// the same user seed.
pub mod stream {
    pub const INIT: u64 = 0x1;
    pub const SAMPLING: u64 = 0x2;
    pub const RAS: u64 = 0x3;
    pub const DROPOUT: u64 = 0x4;
    pub const SUBSAMPLE: u64 = 0x5;
    pub const SYNTH: u64 = 0x6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a tag and an index into a 64-bit sub-seed.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag.rotate_left(17)) ^ index)
}

pub fn rng(seed: u64, tag: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, tag, index))
}
