//! Seed derivation. Every random draw in a run is keyed by the run seed plus
//! a path (task, step, purpose, sample index), so runs are reproducible and
//! independent draws never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Purpose tags used as the last-but-one path element.
pub(crate) mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const STEP: u64 = 3;
    pub const CORESET: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const CONTEXT: u64 = 6;
    pub const LIKELIHOOD: u64 = 7;
    pub const REGULARISER: u64 = 8;
    pub const SUBSET: u64 = 9;
}
