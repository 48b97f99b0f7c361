//! Counter-based randomness.
//!
//! Per-position draws are a pure function of `(seed, stream, counter)`, so a
//! transform produces the same bits whether it runs serially, sharded or in
//! any order.

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64 random bits for `counter` in the stream identified by `(seed, stream)`.
#[inline]
pub fn counter_u64(seed: u64, stream: u64, counter: u64) -> u64 {
    let key = mix64(seed ^ mix64(stream.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    mix64(key ^ counter.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn counter_uniform(seed: u64, stream: u64, counter: u64) -> f64 {
    (counter_u64(seed, stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stream tags keep independent uses of one seed apart.
pub mod streams {
    pub const DUPLICATE_CHOICE: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const PAIRS: u64 = 4;
}
