//! Seeded generator streams.
//!
//! Every consumer draws from its own ChaCha8 stream derived from the
//! experiment seed and a tag path, so results do not depend on the order in
//! which parallel workers finish.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const MODEL_INIT: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const CLIENT: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const LOCAL: u64 = 6;
    pub const DP_NOISE: u64 = 7;
    pub const CALIBRATION: u64 = 8;
    pub const W_AUX: u64 = 9;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, path: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}
