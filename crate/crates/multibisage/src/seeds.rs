//! Seed derivation for schedule-independent randomness.
//!
//! Every randomized stage derives its RNG from a root seed plus a stream
//! tag, so reordering or parallelizing work never changes the numbers a
//! given unit of work sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-avalanche 64-bit mix.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a root seed with a stream tag and two stream parameters.
#[inline]
pub fn derive(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(mix64(seed ^ tag).wrapping_add(a)).wrapping_add(b))
}

/// ChaCha generator for the derived stream; stable across platforms.
pub fn rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, a, b))
}

/// Standard normal via Box-Muller; two uniform draws per sample.
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Stream tags. Distinct constants per consumer keep streams disjoint.
pub mod tags {
    pub const WALK: u64 = 0x57414c4b; // "WALK"
    pub const PRUNE: u64 = 0x5052554e; // "PRUN"
    pub const INIT: u64 = 0x494e4954; // "INIT"
    pub const BATCH: u64 = 0x42415443; // "BATC"
    pub const NEG: u64 = 0x4e454753; // "NEGS"
    pub const SHUFFLE: u64 = 0x53485546; // "SHUF"
    pub const DROPOUT: u64 = 0x44524f50; // "DROP"
    pub const SYNTH: u64 = 0x53594e54; // "SYNT"
    pub const EVAL: u64 = 0x4556414c; // "EVAL"
    pub const SKETCH: u64 = 0x534b4554; // "SKET"
    pub const SECTION: u64 = 0x53454354; // "SECT"
}
