//! Counter-based splittable RNG.
//!
//! Every stream is a pure function of its key `(seed, stream tag, indices...)`,
//! so draws are reproducible regardless of worker scheduling or call order.
//! The generator is SplitMix64 over a mixed key; the mixing constant is fixed
//! so checkpointed runs replay identically across builds.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags keeping independent uses of the same `(seed, epoch, sample)`
/// coordinates from colliding.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const PLAN: u64 = 3;
    pub const DATA: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const HEAD: u64 = 6;
}

/// A SplitMix64 stream positioned by a derived key.
#[derive(Debug, Clone)]
pub struct KeyedRng {
    state: u64,
}

impl KeyedRng {
    /// Derives a stream from the global seed and a list of key parts.
    pub fn from_key(seed: u64, parts: &[u64]) -> Self {
        let mut state = mix(seed ^ GOLDEN);
        for &p in parts {
            state = mix(state.wrapping_add(GOLDEN).wrapping_add(p.wrapping_mul(GOLDEN)));
        }
        KeyedRng { state }
    }

    /// The derived stream key (recorded in [`crate::sampler::MaskPlan`]).
    pub fn key(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased via rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                let v = self.uniform();
                return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
            }
        }
    }

    /// Normal with standard deviation `std`, truncated to two deviations.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }
}
