//! Counter-based pseudorandom numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`: the triple is
//! folded into a 64-bit key with the SplitMix64 finalizer, and a stream of
//! values is produced by stepping a SplitMix64 state from that key. The
//! algorithm is small enough to port bit-exactly to other languages:
//!
//! ```text
//! mix(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!          z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!          z ^ (z >> 31)
//! next():  state += 0x9E3779B97F4A7C15; mix(state)
//! key(seed, stream, counter) = mix(mix(mix(seed) ^ stream) ^ counter)
//! ```
//!
//! Uniforms use the top 53 bits; normals use Box–Muller on two uniforms.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a `(seed, stream, counter)` triple into one key.
pub fn key(seed: u64, stream: u64, counter: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ stream) ^ counter)
}

/// Named streams so independent consumers never share draws.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const KMEANS: u64 = 3;
    pub const INIT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const TEST: u64 = 99;
}

#[derive(Debug, Clone)]
pub struct SplitMix {
    state: u64,
}

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn keyed(seed: u64, stream: u64, counter: u64) -> Self {
        Self::new(key(seed, stream, counter))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1].
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` (n > 0).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
