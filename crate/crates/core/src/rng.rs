//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha8 stream selected by
//! `(seed, purpose)`, so extra draws for one purpose never shift another.
//! The mapping from [`Purpose`] to stream id is part of the reproducibility
//! contract and must not be reordered.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Teacher = 1,
    Tokens = 2,
    Styles = 3,
    Noise = 4,
    ShiftDirection = 5,
    Init = 6,
    Batches = 7,
    Lengths = 8,
    Checks = 9,
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
