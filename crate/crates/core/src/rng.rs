//! Seeded randomness. Every stochastic step in the crate draws from a
//! ChaCha8 stream derived from the experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-seed for a named purpose (splitmix64 finalizer).
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Stream identifiers for `derive`.
pub(crate) const STREAM_CODEBOOK: u64 = 1;
pub(crate) const STREAM_PARTY_INIT: u64 = 2;
pub(crate) const STREAM_SERVER_INIT: u64 = 3;
pub(crate) const STREAM_SHUFFLE: u64 = 4;
