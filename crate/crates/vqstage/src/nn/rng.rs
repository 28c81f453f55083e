//! Seeded random streams.
//!
//! Every stochastic operation in the crate takes an explicit generator; these
//! helpers derive decorrelated substreams so concurrent consumers (per-image
//! decodes, per-run trainers) stay bit-reproducible regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer; decorrelates nearby (master, salt) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn substream(master: u64, salt: u64) -> ChaCha8Rng {
    seeded(mix(master ^ mix(salt)))
}
