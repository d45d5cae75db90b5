//! Seed derivation.
//!
//! Every random stream in the crate is derived from one user seed by hashing a
//! fixed label, so adding a new consumer never shifts an existing stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Mixes `label` into `seed` (FNV-1a over the label, splitmix64 finalizer).
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.rotate_left(17);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(h ^ seed)
}

/// Like [`derive`] but keyed by an integer, e.g. an instance id.
pub fn derive_index(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(derive(seed, label) ^ splitmix(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` under `seed`. Used for per-sample and
/// per-replicate randomness so results do not depend on evaluation order.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
