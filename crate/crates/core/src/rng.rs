//! Counter-based pseudo-random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so voxels
//! can be generated in any order or in parallel and still reproduce the
//! same bytes. The mixer is the SplitMix64 finaliser applied to a combined
//! key.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A keyed stream of random values addressed by counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { key: mix64(mix64(seed ^ GOLDEN).wrapping_add(stream.wrapping_mul(GOLDEN))) }
    }

    /// Derives an independent child stream.
    pub fn substream(&self, stream: u64) -> Self {
        Self { key: mix64(self.key ^ mix64(stream.wrapping_add(GOLDEN))) }
    }

    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range_at(&self, counter: u64, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_at(counter)
    }

    /// Standard normal via Box-Muller on counters `2k` and `2k + 1`.
    #[inline]
    pub fn normal_at(&self, counter: u64) -> f64 {
        let u1 = 1.0 - self.uniform_at(counter.wrapping_mul(2));
        let u2 = self.uniform_at(counter.wrapping_mul(2).wrapping_add(1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn index_at(&self, counter: u64, len: usize) -> usize {
        (self.u64_at(counter) % len as u64) as usize
    }
}
