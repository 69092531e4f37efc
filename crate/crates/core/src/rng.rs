//! Seeded random streams.
//!
//! Every stochastic routine draws from ChaCha8 (`rand_chacha`), an
//! integer-only generator whose output is identical on every platform. Work
//! items that may run in parallel (taxa, cells, chains, replicates) each get
//! their own stream derived from the user seed, so results never depend on
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StatRng = ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> StatRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for a two-level index such as a (taxon, specimen) cell.
pub fn cell_stream(seed: u64, row: usize, col: usize) -> StatRng {
    stream(mix(seed, row as u64), col as u64)
}
