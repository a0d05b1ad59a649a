//! Splittable counter-based pseudo-random generator.
//!
//! Every random decision in the crate (weight init, dropout masks, batch
//! shuffles, synthetic data) flows through this generator so that results
//! are bit-reproducible across platforms and thread counts. A stream is a
//! `(key, counter)` pair; output `n` is a strong 64-bit mix of
//! `key + n`, so streams can be split (`derive`) without coordinating
//! counters and consumed out of order without correlation.
//!
//! The mixer is the splitmix64 finalizer, which has full avalanche; it is
//! not cryptographic and does not need to be.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic random stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    /// Root stream for a user-supplied seed.
    pub fn seed(seed: u64) -> Self {
        StreamRng {
            key: mix64(seed.wrapping_add(GOLDEN)),
            counter: 0,
        }
    }

    /// Independent child stream. Children with distinct tags (or taken
    /// from distinct parents) do not overlap with each other or with the
    /// parent's own output sequence.
    pub fn derive(&self, tag: u64) -> Self {
        StreamRng {
            key: mix64(self.key ^ mix64(tag.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// Convenience for nested scopes: derive through a list of tags.
    pub fn derive_path(&self, tags: &[u64]) -> Self {
        let mut rng = self.clone();
        for &t in tags {
            rng = rng.derive(t);
        }
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform f32 in [0, 1) with 24 bits of entropy.
    pub fn next_f32(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform f32 in [-scale, scale).
    pub fn next_symmetric(&mut self, scale: f32) -> f32 {
        (self.next_f32() * 2.0 - 1.0) * scale
    }

    /// Uniform index in [0, n). `n` must be nonzero.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift map; bias is n / 2^64, irrelevant here.
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal deviate (Box-Muller, one value per call).
    pub fn next_normal(&mut self) -> f32 {
        // Avoid ln(0) by nudging u1 away from zero.
        let u1 = (self.next_f32() as f64).max(1e-12);
        let u2 = self.next_f32() as f64;
        let r = libm::sqrt(-2.0 * libm::log(u1));
        (r * libm::cos(2.0 * core::f64::consts::PI * u2)) as f32
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
