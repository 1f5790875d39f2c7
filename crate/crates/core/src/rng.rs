//! Seeded random streams.
//!
//! Every consumer derives its generator from `(seed, purpose)`, so a result
//! depends only on the seed and never on the order in which other parts of
//! the program drew numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Channel = 1,
    Init = 2,
    Batch = 3,
    Noise = 4,
    Eval = 5,
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Seed of Monte Carlo realization `index`.
pub fn realization_seed(base: u64, index: u64) -> u64 {
    base ^ index
}
