//! Seed derivation. Every random stream in a run is a ChaCha8 generator keyed by
//! the root seed plus a small tuple of tags, so streams are independent of the
//! order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a root seed with a list of tags into a child seed.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(root), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn derive_rng(root: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, tags))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stable tag for a string (FNV-1a).
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
