//! Portable seeded randomness.
//!
//! Every random quantity in the laboratory is drawn from a ChaCha8 stream whose
//! 64-bit seed is derived from a base seed and a list of tags with a SplitMix64
//! finalizer. The primitive draws are fixed here so outputs stay bit-identical
//! across platforms and releases:
//!
//! - uniform `f64` in `[0, 1)`: top 53 bits of `next_u64`, scaled by `2^-53`;
//! - index in `{0, .., n-1}`: high 64 bits of `next_u64 * n` (multiply-shift,
//!   no rejection loop);
//! - standard normals: Marsaglia polar method, producing one pair per accepted
//!   proposal.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream tags used to split a base seed into independent sub-streams.
pub mod tag {
    pub const DATA: u64 = 0x6461_7461;
    pub const SWAP: u64 = 0x7377_6170;
    pub const SCHEDULE: u64 = 0x7363_6864;
    pub const TEST: u64 = 0x7465_7374;
    pub const PAIRS: u64 = 0x7061_6972;
    pub const REPETITION: u64 = 0x7265_7073;
    pub const RUN: u64 = 0x0072_756e;
    pub const BOOTSTRAP: u64 = 0x626f_6f74;
    pub const PROPERTY: u64 = 0x7072_6f70;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and an ordered list of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// A seeded random stream with the fixed primitive draws documented above.
#[derive(Clone, Debug)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn derived(base: u64, tags: &[u64]) -> Self {
        Self::new(derive_seed(base, tags))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `{0, .., n-1}`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// A pair of independent standard normals (Marsaglia polar method).
    pub fn normal_pair(&mut self) -> (f64, f64) {
        loop {
            let u = 2.0 * self.unit() - 1.0;
            let v = 2.0 * self.unit() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                return (u * f, v * f);
            }
        }
    }

    /// Fills `out` with standard normals, consuming `ceil(len / 2)` polar pairs and
    /// discarding the spare value when `len` is odd.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for chunk in out.chunks_mut(2) {
            let (a, b) = self.normal_pair();
            chunk[0] = a;
            if chunk.len() > 1 {
                chunk[1] = b;
            }
        }
    }
}
