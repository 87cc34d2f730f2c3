//! Independent random streams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers. Epoch- and batch-indexed streams are offset from their base.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const INIT: u64 = 3;
    pub const PLOT: u64 = 4;
    pub const EVAL_ATTACK: u64 = 5;
    pub const SHUFFLE: u64 = 1 << 32;
    pub const ATTACK: u64 = 2 << 32;
}

pub fn rng_for(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
