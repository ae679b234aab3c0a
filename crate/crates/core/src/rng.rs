//! Seeded RNG helpers. Every random choice in the crate goes through
//! [`seeded`] so runs are reproducible from the seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type GridRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> GridRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-task (e.g. one node) so results
/// do not depend on the order in which sub-tasks are processed.
pub fn derive(seed: u64, stream: u64) -> GridRng {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Seed for a named sub-stream of an experiment seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    derive(seed, stream).next_u64()
}
