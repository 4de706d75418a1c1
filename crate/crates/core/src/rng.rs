//! Deterministic RNG streams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(master_seed, purpose, a, b)`, typically `a = client id` and `b = round`.
//! No generator state is carried between rounds, so a run can be resumed from
//! a checkpoint holding only the round index, and client rounds can execute in
//! any order or in parallel without changing the trace.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags that keep independent streams from colliding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Participation = 3,
    Chain = 4,
    Compression = 5,
    StatelessInit = 6,
    Uq = 7,
    Prediction = 8,
    Split = 9,
    Baseline = 10,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the stream for `(master_seed, purpose, a, b)`.
pub fn stream(master_seed: u64, purpose: Stream, a: u64, b: u64) -> StreamRng {
    let mut h = splitmix64(master_seed);
    h = splitmix64(h ^ (purpose as u64));
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b.rotate_left(32));
    ChaCha8Rng::seed_from_u64(h)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}
