//! Stateless seed derivation.
//!
//! Every random draw in a run is keyed by `(base seed, purpose, indices...)`
//! rather than by position in a shared generator stream. Results therefore do
//! not depend on how work is split across threads, and a resumed run only
//! needs the step counter to continue the exact same sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a new seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

// Purpose tags.
pub const CROP: u64 = 0xC0;
pub const SAMPLER: u64 = 0x5A;
pub const EPOCH: u64 = 0xE0;
pub const NAT_DRAW: u64 = 0x4A;
pub const TRIAL: u64 = 0x7A;
pub const PROBE: u64 = 0x9B;
