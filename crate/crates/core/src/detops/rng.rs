use super::math::{det_ln, det_sincos_turn};
use super::tensor::{Shape, Tensor};

/// Key for the counter-based generator. Draw `i` under a key is the pure
/// function `mix(mix(mix(seed) ^ stream) ^ i)`, so tensors can be filled in
/// any order (or in parallel) with identical results, and distinct purposes
/// get decorrelated streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetRngKey {
    pub seed: u64,
    pub stream: u64,
}

impl DetRngKey {
    pub fn new(seed: u64, stream: u64) -> Self {
        DetRngKey { seed, stream }
    }

    /// Derives the stream from a label such as a parameter name, so callers
    /// never hand-assign stream numbers.
    pub fn for_purpose(seed: u64, label: &str) -> Self {
        DetRngKey { seed, stream: fnv1a64(label.as_bytes()) }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer: a full-avalanche bijection on u64.
pub(crate) fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn word_at(key: DetRngKey, index: u64) -> u64 {
    mix64(mix64(mix64(key.seed) ^ key.stream) ^ index)
}

/// Uniform draw in [0, 1): the high 24 bits of the mixed word scaled by
/// 2^-24. Both the integer and the scaling are exact in f32, so this is
/// reproducible by construction.
fn uniform_at(key: DetRngKey, index: u64) -> f32 {
    const SCALE: f32 = 1.0 / (1u32 << 24) as f32;
    ((word_at(key, index) >> 40) as u32 as f32) * SCALE
}

/// Standard normal via Box-Muller on draws (2i, 2i+1). The log argument is
/// `1 - u`, exact in f32 for u = k/2^24 and never zero, so the radius is
/// always finite (at most ~5.8).
fn normal_at(key: DetRngKey, index: u64) -> f32 {
    let u = uniform_at(key, 2 * index);
    let v = uniform_at(key, 2 * index + 1);
    let radius = (-2.0 * det_ln(1.0 - u)).sqrt();
    let (_, c) = det_sincos_turn(v);
    radius * c
}

/// Distributions available to `det_rand`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dist {
    Uniform,
    Normal,
    /// Integers in [lo, hi), stored as exact f32 values. Uses a modulo
    /// draw; the tiny bias is irrelevant for label/data synthesis.
    IntRange { lo: i64, hi: i64 },
}

/// Fills a tensor where element `i` depends only on `(key, dist, i)`.
pub fn det_rand(key: DetRngKey, shape: &Shape, dist: Dist) -> Tensor {
    let n = shape.len();
    let mut values = Vec::with_capacity(n);
    match dist {
        Dist::Uniform => {
            for i in 0..n {
                values.push(uniform_at(key, i as u64));
            }
        }
        Dist::Normal => {
            for i in 0..n {
                values.push(normal_at(key, i as u64));
            }
        }
        Dist::IntRange { lo, hi } => {
            let span = (hi - lo).max(1) as u64;
            for i in 0..n {
                values.push((lo + (word_at(key, i as u64) % span) as i64) as f32);
            }
        }
    }
    Tensor::new(shape.clone(), values).expect("count matches shape")
}
