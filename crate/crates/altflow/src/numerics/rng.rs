//! Deterministic counter-based random number generator.
//!
//! splitmix64 over an incrementing counter: the stream for a given seed is a
//! pure function of (seed, call index), so identical seeds reproduce
//! identical streams on every platform. `derive` builds an independent child
//! stream from a label without consuming state, which keeps per-sample data
//! generation reproducible regardless of evaluation order.
//!
//! Gaussian draws go through libm's log/cos rather than the platform libm so
//! the bit pattern of the stream does not depend on the host math library.

use crate::numerics::tensor::{Shape4, Tensor4};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Independent child stream labeled by `stream`. Does not advance this
    /// generator, so derivation commutes with draws made elsewhere.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng {
            state: mix(self.state ^ mix(stream.wrapping_add(GAMMA))),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in [0, n). n must be nonzero.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as u64
    }

    /// Standard normal via Box-Muller. Two uniforms per draw.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let r = (-2.0 * libm::log(u1)).sqrt();
        r * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    /// Tensor of iid standard normal draws, filled in row-major order.
    pub fn gaussian_tensor(&mut self, shape: Shape4) -> Tensor4 {
        let data: Vec<f64> = (0..shape.len()).map(|_| self.next_gaussian()).collect();
        Tensor4::from_vec_unchecked(shape, data)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below((i + 1) as u64) as usize;
            xs.swap(i, j);
        }
    }
}
