//! Seed derivation.
//!
//! Every stochastic call in the pipeline gets its own seed, derived by mixing
//! the run seed with the call's coordinates (stage, iteration, worker,
//! purpose). There is no global RNG state anywhere in the crate, so results
//! never depend on scheduling or on the order in which independent queries
//! finish.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used throughout the crate. ChaCha8 output is stable across platforms
/// and crate versions, which the byte-identical ledger guarantee relies on.
pub type Rng = ChaCha8Rng;

/// Purpose tags for [`derive`]. Fixed numeric values: changing one changes
/// every derived stream.
pub mod purpose {
    pub const REFERENCE: u64 = 1;
    pub const WARMUP: u64 = 2;
    pub const CANDIDATES: u64 = 3;
    pub const THOMPSON: u64 = 4;
    pub const QUERY: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const INIT: u64 = 7;
    pub const TRAFFIC: u64 = 8;
    pub const BETA: u64 = 9;
    pub const REAL: u64 = 10;
    pub const POSTERIOR: u64 = 11;
    pub const ORACLE: u64 = 12;
    pub const REMEASURE: u64 = 13;
    pub const REDRAW: u64 = 14;
}

/// Stage tags for [`derive`].
pub mod stage {
    pub const SIMSEARCH: u64 = 1;
    pub const OFFLINE: u64 = 2;
    pub const ONLINE: u64 = 3;
    pub const BASELINE: u64 = 4;
    pub const ORACLE: u64 = 5;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `run_seed` with an arbitrary list of coordinates.
pub fn mix(run_seed: u64, coords: &[u64]) -> u64 {
    let mut h = splitmix64(run_seed);
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c));
    }
    h
}

/// `hash(run_seed, stage, iteration, worker, purpose)`.
pub fn derive(run_seed: u64, stage: u64, iteration: u64, worker: u64, purpose: u64) -> u64 {
    mix(run_seed, &[stage, iteration, worker, purpose])
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// A child stream of `seed` for one named purpose inside a single call.
pub fn substream(seed: u64, tag: u64) -> Rng {
    rng(mix(seed, &[tag]))
}
