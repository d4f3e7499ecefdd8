//! Counter-based pseudo-random generator.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so results do
//! not depend on evaluation order and independent consumers (parameter
//! initialization, attention masks, batch shuffling, texture synthesis)
//! cannot perturb each other. Streams are usually derived from names or
//! structural indices via [`stream_id`].

use alloc::string::String;
use alloc::vec::Vec;

/// SplitMix64 finalizer; bijective on u64.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a stream identifier from a name (FNV-1a, then mixed).
pub fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix(h)
}

/// Combine structural indices into a stream identifier.
pub fn stream_from_parts(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        h = mix(h ^ p.wrapping_mul(0xD134_2543_DE82_EF95));
    }
    h
}

/// A counter-based generator rooted at one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw draw at (stream, counter).
    pub fn u64_at(&self, stream: u64, counter: u64) -> u64 {
        mix(self.seed ^ mix(stream ^ mix(counter.wrapping_add(0x2545_F491_4F6C_DD1D))))
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn uniform_at(&self, stream: u64, counter: u64) -> f64 {
        (self.u64_at(stream, counter) >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in [0, n); n must be positive.
    pub fn below_at(&self, stream: u64, counter: u64, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform_at(stream, counter) * n as f64) as usize % n
    }

    /// A cursor that hands out consecutive counters on one stream.
    pub fn stream(&self, stream: u64) -> StreamRng {
        StreamRng { rng: *self, stream, counter: 0 }
    }

    /// Named-stream convenience for parameter initialization.
    pub fn named_stream(&self, name: &str) -> StreamRng {
        self.stream(stream_id(name))
    }
}

/// Sequential view over one stream of a [`CounterRng`].
#[derive(Debug, Clone)]
pub struct StreamRng {
    rng: CounterRng,
    stream: u64,
    counter: u64,
}

impl StreamRng {
    pub fn next_u64(&mut self) -> u64 {
        let v = self.rng.u64_at(self.stream, self.counter);
        self.counter += 1;
        v
    }

    pub fn uniform(&mut self) -> f64 {
        let v = self.rng.uniform_at(self.stream, self.counter);
        self.counter += 1;
        v
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        // Reject u1 == 0 so ln stays finite.
        let mut u1 = self.uniform();
        while u1 <= 0.0 {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Normal(0, std) truncated to [-2 std, 2 std] by rejection.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// 0/1 keep-mask of length `len`; each entry is 1 with probability `keep`.
    pub fn bernoulli_mask(&mut self, len: usize, keep: f64) -> Vec<f64> {
        (0..len).map(|_| if self.uniform() < keep { 1.0 } else { 0.0 }).collect()
    }

    /// Fisher-Yates shuffle of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (self.uniform() * (i + 1) as f64) as usize % (i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// Deterministic split assignment: a pure function of (slide id, seed).
///
/// Slides land in train/val/test with the configured probabilities, so
/// adding spots (or whole other slides) never moves a slide across splits.
pub fn split_of_slide(seed: u64, slide_id: &str, train: f64, val: f64) -> crate::data::Split {
    let u = CounterRng::new(seed).uniform_at(stream_from_parts(&[stream_id("split"), stream_id(slide_id)]), 0);
    if u < train {
        crate::data::Split::Train
    } else if u < train + val {
        crate::data::Split::Val
    } else {
        crate::data::Split::Test
    }
}

/// Hash arbitrary text to a short hex fingerprint.
pub fn fingerprint(text: &str) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    let _ = write!(s, "{:016x}", stream_id(text));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_order_independent() {
        let rng = CounterRng::new(7);
        let a = rng.uniform_at(3, 10);
        let _noise = rng.uniform_at(99, 0);
        let b = rng.uniform_at(3, 10);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let rng = CounterRng::new(1);
        let mut s = rng.stream(0);
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn distinct_seeds_decorrelate() {
        let a = CounterRng::new(1).uniform_at(0, 0);
        let b = CounterRng::new(2).uniform_at(0, 0);
        assert_ne!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn bernoulli_rate_is_close() {
        let mut s = CounterRng::new(5).stream(11);
        let mask = s.bernoulli_mask(100_000, 0.9);
        let ones: f64 = mask.iter().sum();
        let rate = ones / 100_000.0;
        assert!((rate - 0.9).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn truncated_normal_bounds() {
        let mut s = CounterRng::new(9).stream(0);
        for _ in 0..20_000 {
            let v = s.truncated_normal(0.02);
            assert!(v.abs() <= 0.04 + 1e-12);
        }
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut s = CounterRng::new(3).stream(1);
        let p = s.permutation(257);
        let mut seen = vec![false; 257];
        for &i in &p {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn split_ignores_other_slides() {
        let a = split_of_slide(42, "slide-07", 0.6, 0.1);
        // Assignment must not depend on anything but (seed, id).
        let b = split_of_slide(42, "slide-07", 0.6, 0.1);
        assert_eq!(a, b);
        let mut train = 0usize;
        for i in 0..1000 {
            let id = alloc::format!("s{i}");
            if split_of_slide(42, &id, 0.6, 0.1) == crate::data::Split::Train {
                train += 1;
            }
        }
        assert!((500..700).contains(&train), "train fraction off: {train}/1000");
    }
}
