//! Seeded, platform-independent random number generation.
//!
//! xoshiro256** (Blackman & Vigna) seeded through SplitMix64, with
//! Box–Muller for normals. No caching of the spare normal, so the stream is
//! a pure function of the 256-bit state and serializes as four u64 words.

use serde::{Deserialize, Serialize};

use crate::tensor::{Error, Result, Tensor};

/// xoshiro256** generator. Constants are the reference ones:
/// scrambler `rotl(s1 * 5, 7) * 9`, shift 17, rotations 45 and 7.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Xoshiro256 {
    state: [u64; 4],
}

#[inline]
fn rotl(x: u64, k: u32) -> u64 {
    x.rotate_left(k)
}

/// SplitMix64 step; used only to expand a 64-bit seed into the state.
#[inline]
fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Xoshiro256 {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut x = seed;
        let state = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Xoshiro256 { state }
    }

    /// Derive an independent stream from this seed and a stream index.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut x = seed ^ stream.wrapping_mul(0xA0761D6478BD642F);
        let state = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Xoshiro256 { state }
    }

    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    pub fn from_state(state: [u64; 4]) -> Self {
        Xoshiro256 { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = rotl(s[1].wrapping_mul(5), 7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        result
    }

    /// Uniform in [0, 1): top 53 bits scaled by 2⁻⁵³.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; never zero, safe for logarithms.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller (cosine branch only, two uniforms per
    /// draw).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, bound) by rejection, unbiased.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % bound;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Tensor of i.i.d. N(0, std²) entries from a fresh stream for `seed`.
pub fn random_gaussian(shape: Vec<usize>, std: f64, seed: u64) -> Result<Tensor> {
    if !(std > 0.0) {
        return Err(Error::InvalidArg(format!("std must be positive, got {std}")));
    }
    let mut rng = Xoshiro256::seed_from_u64(seed);
    Ok(gaussian_from(shape, std, &mut rng))
}

/// Same as [`random_gaussian`] but drawing from an existing stream.
pub fn gaussian_from(shape: Vec<usize>, std: f64, rng: &mut Xoshiro256) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| std * rng.next_gaussian()).collect();
    Tensor::new(shape, data)
}
