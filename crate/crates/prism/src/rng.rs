//! Deterministic seed derivation.
//!
//! Every random draw in the library flows from one user-facing `u64` seed.
//! Independent consumers (weight init, clip shuffling, pair sampling, ...)
//! derive their own stream from `(seed, label, counter)` so that adding a
//! draw in one place never perturbs the values another place sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derives a child seed from `(seed, stream, counter)`.
pub fn derive(seed: u64, stream: &str, counter: u64) -> u64 {
    let mut state = seed ^ fnv1a(stream.as_bytes());
    let first = splitmix64(&mut state);
    state ^= counter.wrapping_mul(0xa076_1d64_78bd_642f);
    let second = splitmix64(&mut state);
    first ^ second
}

/// A ChaCha stream keyed by `(seed, stream, counter)`.
pub fn stream_rng(seed: u64, stream: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, counter))
}
