//! Seed splitting.
//!
//! A run is driven by a single 64-bit seed. Every stochastic subsystem draws
//! from its own stream, derived by hashing the seed together with a textual
//! tag (and optional integer indices such as a device id or round number):
//!
//! ```text
//! h0   = FNV-1a-64(tag bytes)
//! s    = splitmix64(seed ^ h0)
//! s    = splitmix64(s ^ index_i)   for each index
//! rng  = ChaCha8Rng::seed_from_u64(s)
//! ```
//!
//! Adding a new tag never perturbs the draws of existing tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ fnv1a(tag.as_bytes()));
    for &i in indices {
        s = splitmix64(s ^ i);
    }
    s
}

pub fn stream(seed: u64, tag: &str) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tag, &[]))
}

pub fn substream(seed: u64, tag: &str, indices: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tag, indices))
}
