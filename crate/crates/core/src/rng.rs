//! Seed derivation. Every random stream in the pipeline is a ChaCha8
//! generator seeded from a base seed mixed with a purpose tag and indices,
//! so results never depend on call order across components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and a list of indices.
pub fn derive_seed(base: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream(base: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, parts))
}
