//! Counter-based pseudo-random numbers.
//!
//! Every random quantity in this crate is a pure function of
//! `(seed, stream, index)`, so datasets, weight initializations and shuffles
//! are reproducible bit-for-bit regardless of evaluation order, platform, or
//! how many values were drawn before. The mixer is the splitmix64 finalizer,
//! which is cheap and passes the usual statistical batteries at this scale.

/// Distinct stream labels keep independent uses of the same seed decorrelated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    SignalNoise = 1,
    SignalJitter = 2,
    WeightInit = 3,
    Shuffle = 4,
    ImageField = 5,
    PowerIter = 6,
    Trial = 7,
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Raw 64-bit word for `(seed, stream, index)`.
#[inline]
pub fn word(seed: u64, stream: Stream, index: u64) -> u64 {
    // Two mixing rounds so that neighbouring (stream, index) pairs do not
    // share low-bit structure.
    splitmix64(splitmix64(seed ^ (stream as u64).rotate_left(32)).wrapping_add(index))
}

/// Uniform draw in `[0, 1)` with 53-bit resolution.
#[inline]
pub fn uniform(seed: u64, stream: Stream, index: u64) -> f64 {
    (word(seed, stream, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
#[inline]
pub fn uniform_in(seed: u64, stream: Stream, index: u64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(seed, stream, index)
}

/// Standard normal via Box-Muller on two counter slots.
///
/// Index `i` consumes slots `2i` and `2i + 1`, so callers can fetch normal
/// `i` directly without tracking how many were drawn earlier.
pub fn normal(seed: u64, stream: Stream, index: u64) -> f64 {
    let u1 = uniform(seed, stream, 2 * index);
    let u2 = uniform(seed, stream, 2 * index + 1);
    // Guard the log against an exact zero draw.
    let u1 = if u1 <= 0.0 { f64::MIN_POSITIVE } else { u1 };
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fisher-Yates shuffle of `0..n` keyed by `(seed, epoch)`.
pub fn shuffled_indices(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (word(seed, Stream::Shuffle, epoch.wrapping_mul(0x1_0000_0001) + i as u64)
            % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}
