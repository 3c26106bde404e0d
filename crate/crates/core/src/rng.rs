//! Keyed random streams.
//!
//! Every stochastic quantity in the pipeline is drawn from a ChaCha8 stream
//! whose seed is a hash of a tuple of integers (base seed, iteration,
//! environment index, ...). Scheduling work onto a different number of
//! threads never changes which stream a given evaluation reads from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single 64-bit seed (splitmix64 chaining).
pub fn stream_seed(key: &[u64]) -> u64 {
    key.iter().fold(GOLDEN, |acc, &k| mix(acc.wrapping_add(GOLDEN) ^ mix(k.wrapping_add(GOLDEN))))
}

pub fn stream(key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(key))
}
