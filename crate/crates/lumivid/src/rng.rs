//! Deterministic counter-based random number generation.
//!
//! Every source of randomness in the pipeline flows through [`Rng`], a
//! SplitMix64-style counter generator. Streams are derived by mixing a
//! user seed with a stream id, so independent consumers (data order, noise
//! draws, scene sampling, ...) never share state and replays are exact on
//! any platform for the integer stream.

use std::f64::consts::PI;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Well-known stream ids, kept in one place so consumers never collide.
pub mod streams {
    pub const SCENES: u64 = 1;
    pub const TRAJECTORIES: u64 = 2;
    pub const ENV_MAPS: u64 = 3;
    pub const PARAM_INIT: u64 = 4;
    pub const TRAIN_NOISE: u64 = 5;
    pub const DATA_ORDER: u64 = 6;
    pub const SAMPLER: u64 = 7;
    pub const COND_TOKEN: u64 = 8;
    pub const CTX_DROPOUT: u64 = 9;
    pub const TARGET_ENV: u64 = 10;
}

/// Counter-based deterministic generator with derived streams.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
    gauss_spare: Option<f64>,
}

impl Rng {
    /// Generator for `(seed, stream_id)`. Identical arguments give identical
    /// sequences; different stream ids give statistically independent ones.
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key = mix64(mix64(seed ^ GOLDEN).wrapping_add(stream_id));
        Rng { key, counter: 0, gauss_spare: None }
    }

    /// Current draw counter, for checkpointing.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Restore a generator at a saved counter position.
    pub fn with_counter(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut rng = Self::new(seed, stream_id);
        rng.counter = counter;
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ self.counter.wrapping_mul(GOLDEN))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Multiply-shift bound; bias is negligible for the n used here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller. Pairs are drawn together and the
    /// second variate is cached, so the draw sequence stays deterministic.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.gauss_spare = Some(r * s);
        r * c
    }

    /// Uniformly distributed unit vector on the sphere.
    pub fn unit_vector(&mut self) -> [f64; 3] {
        let z = self.uniform_in(-1.0, 1.0);
        let phi = self.uniform_in(0.0, 2.0 * PI);
        let r = (1.0 - z * z).max(0.0).sqrt();
        [r * phi.cos(), z, r * phi.sin()]
    }

    /// Fill a buffer with standard normal draws.
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.gaussian();
        }
    }
}

/// Stable 64-bit hash of a seed, used for train/val split membership.
pub fn stable_hash(seed: u64) -> u64 {
    mix64(seed ^ 0xD6E8_FEB8_6659_FD93)
}
