//! Counter-based pseudo-random generator.
//!
//! Everything stochastic in this crate (rewards, features, preference
//! labels, minibatch indices, perturbations) draws from this generator so
//! that a run is a pure function of its seeds and any other implementation
//! of the same algorithm reproduces the streams bit for bit.
//!
//! The algorithm is the SplitMix64 output function applied to a counter:
//!
//! ```text
//! draw(seed, i):                       # i-th draw of the stream, 0-based
//!     z = seed + (i + 1) * 0x9E3779B97F4A7C15        (mod 2^64)
//!     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9       (mod 2^64)
//!     z = (z ^ (z >> 27)) * 0x94D049BB133111EB       (mod 2^64)
//!     return z ^ (z >> 31)
//! ```
//!
//! Derived conversions, also part of the contract:
//!
//! - `next_f64`: `(draw >> 11) * 2^-53`, uniform on `[0, 1)` with 53 bits.
//! - `next_index(n)`: `(draw * n) >> 64` using 128-bit intermediate
//!   arithmetic (multiply-shift; bias below `n / 2^64` is ignored).
//! - `next_symmetric`: `2 * next_f64() - 1`, uniform on `[-1, 1)`.
//!
//! Independent sub-streams are derived by hashing a stream label into the
//! seed: `stream(seed, label)` seeds a new generator with
//! `mix64(seed ^ mix64(label))`, where `mix64` is the same finalizer as
//! above without the counter increment.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream labels used across the crate. Part of the reproducibility
/// contract: changing a label changes every artifact derived from it.
pub mod streams {
    /// Ground-truth reward draws.
    pub const REWARDS: u64 = 1;
    /// Feature-vector draws.
    pub const FEATURES: u64 = 2;
    /// Preference-pair sampling.
    pub const PAIRS: u64 = 3;
    /// Seeded policy initialization.
    pub const INIT: u64 = 4;
    /// Minibatch index draws.
    pub const MINIBATCH: u64 = 5;
    /// Random policy perturbations in oracle checks.
    pub const PERTURB: u64 = 6;
}

/// Deterministic counter-based generator. See the module docs for the
/// exact algorithm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Generator for an independent labeled sub-stream of `seed`.
    pub fn stream(seed: u64, label: u64) -> Self {
        Self::new(mix64(seed ^ mix64(label)))
    }

    /// Number of draws made so far.
    pub fn draws(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[-1, 1)`.
    pub fn next_symmetric(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index requires n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Two distinct uniform indices in `0..n`. Panics if `n < 2`.
    pub fn next_distinct_pair(&mut self, n: usize) -> (usize, usize) {
        assert!(n >= 2, "next_distinct_pair requires n >= 2");
        let a = self.next_index(n);
        let mut b = self.next_index(n - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    }
}
