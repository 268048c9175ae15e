//! Seed plumbing. Every random draw in the crate comes from a ChaCha stream
//! derived from one run seed and a stream label, so components never share
//! or perturb each other's sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a run seed with a stream label into an independent 64-bit seed.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer over the xor.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}
