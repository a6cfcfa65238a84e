//! Counter-based stream derivation. Every random decision in the crate draws
//! from a `ChaCha8Rng` identified by `(seed, stream)`, so work can be split
//! across threads or resumed mid-run without changing any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for a `(step, purpose)` pair under one master seed.
pub fn step_stream(seed: u64, step: u64, purpose: Purpose) -> Rng {
    stream(seed, step.wrapping_mul(Purpose::COUNT) + purpose as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Batch = 0,
    Corruption = 1,
    Dropout = 2,
    Init = 3,
}

impl Purpose {
    const COUNT: u64 = 4;
}
