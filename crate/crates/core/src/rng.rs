//! Counter-based random numbers.
//!
//! Every random quantity in the crate is a pure function of a 64-bit key and
//! a counter, so results never depend on iteration order or thread count.
//! The generator is SplitMix64 evaluated at an explicit position: output
//! number `n` of the stream keyed by `key` is `mix64(key + (n + 1) * GAMMA)`.
//! The constants are frozen; changing them invalidates the golden files.

/// Weyl increment of SplitMix64.
pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// 2^-53, the spacing of the unit doubles we produce.
const UNIT: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 output finalizer (variant 13 of Stafford's mixers).
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output number `counter` of the SplitMix64 stream seeded with `key`.
#[inline(always)]
pub fn splitmix_at(key: u64, counter: u64) -> u64 {
    mix64(key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// Map 64 random bits to a double in `[0, 1)` using the top 53 bits.
#[inline(always)]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * UNIT
}

/// Integer threshold `t` such that `unit_f64(b) < p` iff `(b >> 11) < t`.
///
/// `p * 2^53` is exact for every double `p` in `[0, 1]`, so comparing the
/// integer mantissa against its ceiling is equivalent to the float test.
#[inline]
pub fn threshold_53(p: f64) -> u64 {
    (p * (1u64 << 53) as f64).ceil() as u64
}

/// Derive an independent child seed, e.g. the seed of chip `index` of a panel.
#[inline]
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix_at(mix64(parent ^ 0x6A09_E667_F3BC_C908), index)
}

/// Sequential view of a counter stream; handy where a consumer wants `next()`.
#[derive(Debug, Clone)]
pub struct CounterStream {
    key: u64,
    counter: u64,
}

impl CounterStream {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix_at(self.key, self.counter);
        self.counter += 1;
        v
    }

    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    pub fn position(&self) -> u64 {
        self.counter
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_splitmix_sequence() {
        // Sequential SplitMix64 with state 0: the first outputs are well known.
        assert_eq!(splitmix_at(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix_at(0, 1), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(splitmix_at(0, 2), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn threshold_matches_float_comparison() {
        let ps = [0.0, 1e-9, 0.001, 0.01, 0.1, 0.5, 0.999, 1.0];
        for (n, &p) in ps.iter().enumerate() {
            let t = threshold_53(p);
            for c in 0..2000u64 {
                let b = splitmix_at(n as u64, c);
                assert_eq!(unit_f64(b) < p, (b >> 11) < t);
            }
        }
    }

    #[test]
    fn unit_range() {
        assert_eq!(unit_f64(0), 0.0);
        assert!(unit_f64(u64::MAX) < 1.0);
    }

    #[test]
    fn stream_matches_counter() {
        let mut s = CounterStream::new(42);
        for c in 0..10 {
            assert_eq!(s.next_u64(), splitmix_at(42, c));
        }
        assert_eq!(s.position(), 10);
    }
}
