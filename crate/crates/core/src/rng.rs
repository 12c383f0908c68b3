//! Counter-based random streams.
//!
//! Every random decision is a pure function of `(seed, key, counter)`, so the
//! value drawn for one tensor element never depends on which other elements
//! or tensors were processed first.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(seed.wrapping_mul(0xA076_1D64_78BD_642F) ^ mix64(label ^ 0xE703_7ED1_A0B4_28DB))
}

/// Uniform draw in `[0, 1)` for element `index` of the stream keyed by
/// `(seed, key)`.
#[inline]
pub fn uniform_at(seed: u64, key: u64, index: u64) -> f64 {
    let stream = derive_seed(seed, key);
    let bits = mix64(stream.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential stream over the same construction, for weight init and sampling.
#[derive(Debug, Clone)]
pub struct Stream {
    seed: u64,
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, label: &str) -> Stream {
        Stream {
            seed,
            key: fnv1a64(label.as_bytes()),
            counter: 0,
        }
    }

    pub fn next_f64(&mut self) -> f64 {
        let u = uniform_at(self.seed, self.key, self.counter);
        self.counter += 1;
        u
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n.saturating_sub(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn uniform_is_pure_and_in_range() {
        for i in 0..1000 {
            let u = uniform_at(7, 11, i);
            assert!((0.0..1.0).contains(&u));
            assert_eq!(u.to_bits(), uniform_at(7, 11, i).to_bits());
        }
        assert_ne!(uniform_at(7, 11, 0), uniform_at(8, 11, 0));
        assert_ne!(uniform_at(7, 11, 0), uniform_at(7, 12, 0));
    }

    #[test]
    fn uniform_mean_and_normal_moments() {
        let n = 20_000;
        let mean: f64 = (0..n).map(|i| uniform_at(1, 2, i)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let mut s = Stream::new(3, "normal");
        let xs: alloc::vec::Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.03 && (v - 1.0).abs() < 0.05, "mean {m} var {v}");
    }
}
