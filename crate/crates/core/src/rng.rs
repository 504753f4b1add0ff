//! Counter-based random numbers.
//!
//! Every variate is a pure function of `(seed, stream, counter)`: the triple is
//! pushed through SplitMix64 finalisers and the resulting 64-bit words are
//! turned into uniforms (top 53 bits) and, via Box-Muller, standard normals.
//! Nothing is stateful, so values can be regenerated in any order, on any
//! thread, and a range can be extended without touching existing entries.

use std::f64::consts::TAU;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed, e.g. the seed of replica `index` under `master`.
#[inline]
pub fn hash64(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_mul(GOLDEN).wrapping_add(0x6A09_E667_F3BC_C909)))
}

#[inline]
fn word(seed: u64, stream: u64, counter: i64, lane: u64) -> u64 {
    let a = hash64(seed, stream);
    let b = splitmix64(a ^ (counter as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(b ^ lane.wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Uniform on [0, 1).
#[inline]
pub fn uniform(seed: u64, stream: u64, counter: i64) -> f64 {
    (word(seed, stream, counter, 2) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal.
#[inline]
pub fn normal(seed: u64, stream: u64, counter: i64) -> f64 {
    let u1 = ((word(seed, stream, counter, 0) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (word(seed, stream, counter, 1) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Sequential cursor over one `(seed, stream)` pair.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    counter: i64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            seed,
            stream,
            counter: 0,
        }
    }

    pub fn normal(&mut self) -> f64 {
        let z = normal(self.seed, self.stream, self.counter);
        self.counter += 1;
        z
    }

    pub fn uniform(&mut self) -> f64 {
        let u = uniform(self.seed, self.stream, self.counter);
        self.counter += 1;
        u
    }
}
