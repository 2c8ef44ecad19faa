//! Seeded, splittable random streams.
//!
//! Every random sub-step draws from its own ChaCha stream derived from a single
//! user seed, so each step can be reproduced on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Returns the generator for stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A 64-bit seed for sub-step `tag`, independent across tags.
pub fn derive(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    stream(seed, tag.wrapping_add(1 << 32)).next_u64()
}
