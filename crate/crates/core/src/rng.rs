//! Counter-based deterministic random values.
//!
//! Every random quantity in the crate is a pure function of a seed and a
//! set of integer/string coordinates (sample index, step, element index,
//! texel position, ...). There is no mutable generator state, so any value
//! can be regenerated in isolation, samples can be produced in parallel in
//! any order, and resuming a run from a checkpoint replays the exact same
//! stream. The mixer is the splitmix64 finalizer.

/// splitmix64 finalizer: a bijective avalanche mix on 64 bits.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A seed plus a derivation path. Cheap to copy; deriving never mutates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Key(u64);

impl Key {
    pub fn new(seed: u64) -> Self {
        Key(mix(seed))
    }

    /// Derive a sub-stream by label (FNV-1a over the bytes, then mixed in).
    pub fn stream(self, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in label.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Key(mix(self.0 ^ h))
    }

    /// Derive a sub-stream by integer coordinate.
    pub fn index(self, i: u64) -> Self {
        Key(mix(self.0.wrapping_add(0x632b_e59b_d9b4_e019).wrapping_mul(2).wrapping_add(i)))
    }

    /// Raw 64-bit value at counter position `i`.
    #[inline]
    pub fn u64_at(self, i: u64) -> u64 {
        mix(self.0 ^ mix(i.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    #[inline]
    pub fn f64_at(self, i: u64) -> f64 {
        (self.u64_at(i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    #[inline]
    pub fn f64_open_at(self, i: u64) -> f64 {
        ((self.u64_at(i) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on counters (2i, 2i+1).
    #[inline]
    pub fn gauss_at(self, i: u64) -> f64 {
        let u1 = self.f64_open_at(2 * i);
        let u2 = self.f64_at(2 * i + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn usize_at(self, i: u64, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.u64_at(i) % n as u64) as usize
    }

    /// Fill a buffer with standard normal values.
    pub fn gauss_vec(self, len: usize) -> Vec<f64> {
        (0..len).map(|i| self.gauss_at(i as u64)).collect()
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_stream_separated() {
        let k = Key::new(7);
        assert_eq!(k.u64_at(0), Key::new(7).u64_at(0));
        assert_ne!(k.u64_at(0), k.u64_at(1));
        assert_ne!(k.stream("a").u64_at(0), k.stream("b").u64_at(0));
        assert_ne!(k.index(0).u64_at(0), k.index(1).u64_at(0));
    }

    #[test]
    fn uniform_range() {
        let k = Key::new(123).stream("u");
        for i in 0..10_000 {
            let x = k.f64_at(i);
            assert!((0.0..1.0).contains(&x));
            let y = k.f64_open_at(i);
            assert!(y > 0.0 && y <= 1.0);
        }
    }

    #[test]
    fn gauss_moments() {
        let k = Key::new(99).stream("g");
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for i in 0..n {
            let x = k.gauss_at(i);
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
