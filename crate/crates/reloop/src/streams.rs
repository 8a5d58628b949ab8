//! Deterministic random-stream derivation.
//!
//! All randomness in the crate flows through `ChaCha8`, keyed by a single
//! 64-bit user seed and split into independent substreams via the cipher's
//! 64-bit stream counter. A `(seed, stream)` pair fully determines the draw
//! sequence, so results are reproducible and independent of evaluation order
//! or worker-thread count.
//!
//! Stream-id layout (bit 63 distinguishes the two namespaces):
//! - forest namespace (bit 63 set): `[1][arm:1][kind:1][tree:61-bit field]`,
//!   where `kind 0` keys one tree's per-unit bootstrap counts (drawn
//!   sequentially in unit order) and `kind 1` keys that tree's growth
//!   randomness (feature subsampling).
//! - simulation namespace (bit 63 clear): low-numbered streams for synthetic
//!   population draws and one stream per Monte Carlo replication.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const FOREST_BIT: u64 = 1 << 63;
const ARM_BIT: u64 = 1 << 62;
const GROWTH_BIT: u64 = 1 << 61;

/// Keys the per-unit bootstrap counts of one (arm, tree) pair. Unit i's count
/// is the i-th draw of the stream, so it is a fixed function of unit position
/// and never of the realized assignment.
pub fn forest_count_stream(arm: bool, tree: usize) -> u64 {
    debug_assert!(tree < (1 << 30));
    FOREST_BIT | if arm { ARM_BIT } else { 0 } | tree as u64
}

/// Keys feature subsampling for one (arm, tree) pair.
pub fn forest_growth_stream(arm: bool, tree: usize) -> u64 {
    debug_assert!(tree < (1 << 30));
    FOREST_BIT | GROWTH_BIT | if arm { ARM_BIT } else { 0 } | tree as u64
}

// Simulation namespace.
pub const POPULATION_COVARIATES: u64 = 1;
pub const POPULATION_NOISE: u64 = 2;
pub const REMNANT_COVARIATES: u64 = 3;
pub const REMNANT_NOISE: u64 = 4;

const REPLICATION_BASE: u64 = 1 << 32;

/// Keys the assignment draws of one Monte Carlo replication.
pub fn replication_stream(rep: usize) -> u64 {
    REPLICATION_BASE + rep as u64
}
