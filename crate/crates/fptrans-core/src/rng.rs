//! Deterministic RNG stream derivation.
//!
//! Every random decision in a run (dataset rendering, episode sampling,
//! partition seeding, pool sampling, pair subsampling, parameter init) draws
//! from a stream derived from the master seed plus a purpose tag and indices.
//! Streams are independent of each other and of call order, which is what
//! makes checkpoint resume bitwise-identical to an uninterrupted run: epoch
//! `e` always sees the same streams no matter how the process got there.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams. Keep values stable; they are part of the
/// reproducibility contract.
pub mod purpose {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN_EPISODES: u64 = 3;
    pub const EVAL_EPISODES: u64 = 4;
    pub const PARTITION_PROMPT: u64 = 5;
    pub const PARTITION_FEATURE: u64 = 6;
    pub const POOL_SAMPLING: u64 = 7;
    pub const PAIR_SUBSAMPLE: u64 = 8;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from the master seed and a tag tuple.
pub fn derive(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = master ^ 0x5bf0_3635_dee3_9a1d;
    let mut mix = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x2545_f491_4f6c_dd1d);
        mix ^= splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    let mut s = mix;
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
