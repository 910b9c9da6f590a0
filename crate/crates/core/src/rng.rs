//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8, a counter-based
//! generator: a 64-bit seed selects the key and a 64-bit stream id selects
//! an independent sequence, so per-sample and per-purpose streams never
//! overlap and do not depend on draw order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier recorded in configs and checkpoints.
pub const ALGORITHM: &str = "chacha8";

/// Stream used for parameter initialization.
pub const INIT_STREAM: u64 = 0x1;
/// Stream used for minibatch shuffling.
pub const SHUFFLE_STREAM: u64 = 0x2;
/// Stream used for scene generation, keyed by the per-sample seed.
pub const SAMPLE_STREAM: u64 = 0x3;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
