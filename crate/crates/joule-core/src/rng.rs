//! Seed plumbing.
//!
//! Every random draw in the crate descends from a single experiment seed.
//! Consumers get independent ChaCha streams keyed by `(seed, stream id)`, so
//! adding draws to one consumer never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Fixed stream ids. The numbering is part of the reproducibility contract:
/// renumbering changes every seeded artifact.
pub mod stream {
    pub const PARAM_INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const BUFFER: u64 = 4;
    pub const CHAIN_NOISE: u64 = 5;
    pub const ATTACK: u64 = 6;
    pub const INIT_FIT: u64 = 7;
}

/// Deterministic ChaCha stream for `(seed, id)`.
pub fn stream_rng(seed: u64, id: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&id.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}
