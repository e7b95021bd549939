//! Keyed, splittable RNG streams.
//!
//! Every random component (replication, bootstrap draw, retry) gets its own
//! stream derived from a master seed and an integer path, so results are
//! identical regardless of thread schedule.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit stream key from a seed and a path of indices.
pub fn stream_key(seed: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(seed);
    for &p in path {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0xA5A5_A5A5_A5A5_A5A5)));
    }
    s
}

/// A ChaCha8 generator keyed by `(seed, path)`.
pub fn keyed_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, path))
}
