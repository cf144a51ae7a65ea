//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator addressed by
//! `(seed, stream)`. ChaCha is counter based, so stream `i` is the same
//! sequence no matter which thread consumes it or in what order; parallel
//! code derives one stream per subject or per replicate and never shares a
//! generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a master seed with a list of tags into a new 64-bit seed (SplitMix64 finalizer).
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = mix(master ^ 0x9E37_79B9_7F4A_7C15);
    for &t in tags {
        h = mix(h ^ mix(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
