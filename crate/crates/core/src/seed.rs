//! Seed derivation.
//!
//! Every random stream in a run is derived from the master seed with the
//! SplitMix64 finalizer:
//!
//! ```text
//! derive(parent, stream) = mix64(parent ^ mix64(stream + 0x9E3779B97F4A7C15))
//! ```
//!
//! Replicate `i` uses `derive(master, i)`; inside a replicate the server,
//! the baseline bot and the β calibration server use streams 1, 2 and 3.
//! Adding replicates never changes the seeds of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub const SERVER_STREAM: u64 = 1;
pub const BOT_STREAM: u64 = 2;
pub const CALIBRATION_STREAM: u64 = 3;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(parent: u64, stream: u64) -> u64 {
    mix64(parent ^ mix64(stream.wrapping_add(GOLDEN)))
}

pub fn replicate_seed(master: u64, replicate_index: u64) -> u64 {
    derive(master, replicate_index)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maps a 64-bit word to a uniform double in [0, 1).
pub fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
