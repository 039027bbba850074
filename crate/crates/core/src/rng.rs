//! Counter-based random streams.
//!
//! Every random draw in the crate is keyed by `(seed, stream, a, b)`, e.g.
//! `(seed, Propagate, period, particle)`. The generator for a key is built on
//! demand, so results do not depend on iteration order or thread count.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Named substreams derived from one top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Initial = 1,
    Propagate = 2,
    Resample = 3,
    Smoother = 4,
    Proposal = 5,
    Accept = 6,
    FilterSeed = 7,
    ChainInit = 8,
    ResidualMc = 9,
    Simulation = 10,
    ChibJeliazkov = 11,
    Experiment = 12,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a stream tag and two counters into a 64-bit key.
#[inline]
pub fn derive_key(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed ^ 0x5851_F42D_4C95_7F2D);
    h = splitmix64(h ^ (stream as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    h = splitmix64(h ^ a.wrapping_mul(0xE703_7ED1_A0B4_28DB));
    splitmix64(h ^ b.wrapping_mul(0x8EBC_6AF0_9C88_C6E3))
}

/// Generator for one `(seed, stream, a, b)` cell.
#[inline]
pub fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(derive_key(seed, stream, a, b))
}

/// Derives a child seed, e.g. the particle-filter seed for MCMC iteration `i`.
pub fn child_seed(seed: u64, stream: Stream, a: u64) -> u64 {
    derive_key(seed, stream, a, 0)
}
