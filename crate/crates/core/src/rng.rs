//! Seeded random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream whose seed is derived
//! from an experiment seed plus integer coordinates (topology index, trial
//! index, ...). Results therefore do not depend on evaluation order.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

/// Stream tags used when deriving sub-seeds.
pub mod stream {
    pub const TOPOLOGY: u64 = 1;
    pub const TRIAL: u64 = 2;
    pub const CHANNEL: u64 = 3;
    pub const NOISE: u64 = 4;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and coordinates into a new seed.
pub fn derive_seed(base: u64, tag: u64, coords: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ splitmix64(tag));
    for &c in coords {
        h = splitmix64(h ^ c.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Circularly-symmetric complex Gaussian with total variance `variance`.
#[inline]
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}
