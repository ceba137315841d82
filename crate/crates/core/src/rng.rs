//! Keyed random substreams.
//!
//! Every consumer of randomness derives its own generator from the master
//! seed and a key path such as `(purpose, cell, client)`. Adding a client or a
//! grid point never perturbs the streams of the others, and the order in which
//! tasks run has no influence on what they draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags used as the first key of a substream path.
pub mod purpose {
    pub const THETA_STAR: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const LOCAL_TRAIN: u64 = 3;
    pub const FOLDS: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const SERVER: u64 = 6;
    pub const TEST: u64 = 7;
    pub const REFERENCE: u64 = 8;
    pub const SHIFT: u64 = 9;
    pub const FAILURES: u64 = 10;
    pub const CENTRAL: u64 = 11;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a key path into the master seed.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(master), |acc, k| splitmix64(acc ^ splitmix64(*k)))
}

pub fn substream(master: u64, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, keys))
}
