//! Seed derivation and counter-addressed random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream keyed by
//! `(seed, stream)` and positioned by a counter, so step `t` of a run can be
//! regenerated without replaying steps `0..t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers; distinct purposes never share keystream.
pub mod streams {
    pub const GRAPH: u64 = 1;
    pub const WALK: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const MINIBATCH: u64 = 4;
    pub const SCHEDULE: u64 = 5;
    pub const DATA: u64 = 6;
}

/// 64-bit finalizer from SplitMix64.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed, e.g. for the k-th retry of a random graph draw.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// A sequential generator for a given seed and stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Words reserved per counter position (2^20 32-bit words).
const WORDS_PER_COUNTER: u32 = 20;

/// Generator positioned at `counter` within `(seed, stream)`.
///
/// Each counter owns a disjoint window of 2^20 keystream words, enough for
/// about 2^19 `u64` draws before it would run into the next window.
pub fn counter_rng(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, stream);
    rng.set_word_pos((counter as u128) << WORDS_PER_COUNTER);
    rng
}
