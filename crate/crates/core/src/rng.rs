//! Seeded random streams.
//!
//! Every run owns one master seed. Independent streams (per trajectory,
//! per trial, per stage) are ChaCha8 generators keyed by the master seed
//! with a distinct stream id, so draws never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

/// Master generator for a seed.
pub fn from_seed(seed: u64) -> RunRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` derived from `seed`.
pub fn stream(seed: u64, stream: u64) -> RunRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Stream ids used by the pipeline stages.
pub mod streams {
    pub const AUTONOMOUS_ICS: u64 = 1;
    pub const FORCED_ICS: u64 = 2;
    pub const FORCED_INPUTS: u64 = 3;
    pub const INIT_PHASE1: u64 = 10;
    pub const INIT_OBS: u64 = 11;
    pub const INIT_DYN: u64 = 12;
    pub const SHUFFLE_PHASE1: u64 = 20;
    pub const SHUFFLE_OBS: u64 = 21;
    pub const SHUFFLE_DYN: u64 = 22;
    pub const SHUFFLE_CURRICULUM: u64 = 23;
    pub const HELD_OUT: u64 = 30;
    pub const BOUND: u64 = 40;
    /// Benchmark trials use `TRIAL_BASE + trial index`.
    pub const TRIAL_BASE: u64 = 1 << 32;
}
