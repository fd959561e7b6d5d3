//! Counter-based random-number streams.
//!
//! Every stochastic quantity in the library is drawn from a ChaCha8 stream
//! keyed by the tuple `(master seed, condition, rollout, timestep)`. Streams
//! are mutually independent and constructed on demand, so rollouts can be
//! sampled in any order, across any number of threads, and still reproduce
//! bit-for-bit. Within one `(rollout, timestep)` stream the draw order is
//! fixed: action noise first, then process noise.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream for one `(rollout, timestep)` cell of one batch.
pub fn stream(master: u64, condition: u64, rollout: u64, timestep: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&condition.to_le_bytes());
    seed[16..24].copy_from_slice(&rollout.to_le_bytes());
    seed[24..32].copy_from_slice(&timestep.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Derives a sub-seed from a master seed and a tag (iteration index, seed
/// index, ...). SplitMix64 finalizer: distinct inputs give well-separated
/// outputs, so derived streams never collide with each other in practice.
pub fn derive(master: u64, tag: u64) -> u64 {
    let mut z = master
        .wrapping_add(tag.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// `n` independent standard-normal draws as a vector.
pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}
