//! Seeded random streams. Every consumer derives its own stream from the
//! run seed and a fixed tag, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub mod tags {
    pub const ENCODER: u64 = 0x100;
    pub const FUSION: u64 = 0x200;
    pub const HEADS: u64 = 0x300;
    pub const SHUFFLE: u64 = 0x400;
    pub const SPLIT: u64 = 0x500;
    pub const TEMPLATES: u64 = 0x600;
    /// Per-sample generation streams start here.
    pub const SAMPLES: u64 = 1 << 32;
}
