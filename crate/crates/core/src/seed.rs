//! Named, independent RNG streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for the stream named `tag` under `master`. Stable across platforms
/// and compiler versions.
pub fn derive(master: u64, tag: &str) -> u64 {
    // FNV-1a over the tag
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

/// Seed for the `index`-th item of a numbered stream.
pub fn derive_indexed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive(master, tag) ^ splitmix64(index))
}

pub fn rng(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag))
}
