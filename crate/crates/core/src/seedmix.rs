//! Deterministic seed derivation.
//!
//! Every random draw in the workspace comes from a `ChaCha8Rng` whose seed is
//! derived from a master seed plus a textual path of component names. The
//! derivation is a splitmix64 chain, so adding streams never perturbs
//! existing ones and two distinct paths give independent-looking streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 step: advance `state` and return the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fold `label` into `seed`, returning a new derived seed.
pub fn mix_str(seed: u64, label: &str) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &b in label.as_bytes() {
        state ^= b as u64;
        out ^= splitmix64(&mut state);
    }
    out
}

/// Fold an integer component (e.g. an index) into `seed`.
pub fn mix_u64(seed: u64, value: u64) -> u64 {
    let mut state = seed ^ value.rotate_left(17);
    splitmix64(&mut state)
}

/// RNG for the stream named by `path` under `seed`.
pub fn rng(seed: u64, path: &[&str]) -> ChaCha8Rng {
    let mut s = seed;
    for part in path {
        s = mix_str(s, part);
    }
    ChaCha8Rng::seed_from_u64(s)
}
