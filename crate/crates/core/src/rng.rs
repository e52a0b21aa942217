//! Seeding. Every replicate or chain draws from its own ChaCha stream derived
//! from one 64-bit seed, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable consulted when no explicit seed is given.
pub const SEED_ENV: &str = "BERGDPP_SEED";

/// Generator for replicate `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
