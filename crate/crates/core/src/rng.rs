//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded through
//! [`mix_seed`]. ChaCha8 is a documented, platform-independent algorithm, so
//! streams reproduce bit-for-bit anywhere; the mixer below is SplitMix64's
//! finalizer over (base, FNV-1a(stream), index), which keeps streams for
//! different purposes and indices statistically independent of each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive an independent sub-seed from a base seed, a stream label, and an
/// index. Used for per-sample, per-epoch, and per-purpose random streams.
pub fn mix_seed(base: u64, stream: &str, index: u64) -> u64 {
    splitmix(splitmix(base ^ fnv1a(stream.as_bytes())).wrapping_add(index))
}

/// ChaCha8 generator for the derived sub-seed.
pub fn rng_for(base: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, stream, index))
}
