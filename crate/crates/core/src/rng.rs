//! Deterministic, splittable random streams.
//!
//! ChaCha8 is counter-based: a `(seed, stream)` pair names an independent
//! sequence, so sub-tasks (data synthesis, init, batching) draw from their
//! own stream and adding draws to one never shifts another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type DetRng = ChaCha8Rng;

/// Stream ids used by the crate. Kept in one place so they never collide.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const BENCH: u64 = 4;
    pub const CHECK: u64 = 5;
}

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn split(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut DetRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut DetRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
