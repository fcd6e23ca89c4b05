//! Seeded random streams.
//!
//! Every source of randomness is a ChaCha8 stream addressed by
//! `(seed, salt, index)`: the seed keys the cipher, and the salt/index pair
//! selects an independent stream. Work items (images, training samples)
//! each own a stream, so results do not depend on worker count or
//! scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream salts, one per purpose. Indexes below 2^40 never collide across
/// salts.
pub mod salt {
    pub const INIT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const TRAIN_DENOISER: u64 = 3;
    pub const TRAIN_DDC: u64 = 4;
    pub const SOLVE: u64 = 5;
    pub const MEASUREMENT: u64 = 6;
    pub const FEATURES: u64 = 7;
    pub const TEST: u64 = 99;
}

const INDEX_BITS: u32 = 40;

/// Independent generator for stream `(salt, index)` under `seed`.
pub fn stream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << INDEX_BITS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((salt << INDEX_BITS) | (index & ((1 << INDEX_BITS) - 1)));
    rng
}
