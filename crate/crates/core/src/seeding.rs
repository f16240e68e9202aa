//! Deterministic RNG stream derivation.
//!
//! Every stochastic component of a run (shard generation, poisoning
//! schedule, per-round noise, attack jitter, ...) draws from its own
//! ChaCha stream derived from the experiment seed and a tag path, so that
//! reordering or parallelizing components never perturbs another stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream tags for the independent RNG consumers of one experiment.
pub mod tag {
    pub const FEDERATION: u64 = 1;
    pub const SCHEDULE: u64 = 2;
    pub const GENERATOR_INIT: u64 = 3;
    pub const ROUND_NOISE: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const ATTACK: u64 = 6;
    pub const SERVER_SHARD: u64 = 7;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a ChaCha20 stream from a base seed and a tag path.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha20Rng {
    let mut state = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    let mut bytes = [0u8; 32];
    let mut word = state;
    for chunk in bytes.chunks_exact_mut(8) {
        word = splitmix64(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha20Rng::from_seed(bytes)
}
