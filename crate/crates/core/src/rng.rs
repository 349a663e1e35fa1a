//! Deterministic seed derivation.
//!
//! Every random quantity is drawn from a ChaCha stream whose seed is derived
//! from one master seed and a path of integer keys (task index, repetition,
//! step, ...). Work can therefore be split or reordered without changing the
//! values any individual unit sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `keys` into `seed`, one key at a time.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, keys))
}
