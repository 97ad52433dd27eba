//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! `u64`. Child seeds are derived with a fixed hash so that results do not
//! depend on the standard library's hasher or on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the seed bytes followed by the identifier, finished with a
/// splitmix64 round so that nearby inputs land far apart.
pub fn stable_hash(base_seed: u64, run_identifier: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in base_seed.to_le_bytes().iter().chain(run_identifier.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for a named sub-stream of `seed`.
pub fn child_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    rng(stable_hash(seed, stream))
}
