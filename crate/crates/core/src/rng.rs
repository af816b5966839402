//! Philox4x32-10 counter-based random stream.
//!
//! Every chain owns one stream keyed by its dispatch index and the global
//! seed, so chain trajectories are independent of scheduling and thread
//! count.

use std::f64::consts::PI;

const MUL0: u32 = 0xD251_1F53;
const MUL1: u32 = 0xCD9E_8D57;
const WEYL0: u32 = 0x9E37_79B9;
const WEYL1: u32 = 0xBB67_AE85;
const ROUNDS: usize = 10;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let prod = u64::from(a) * u64::from(b);
    ((prod >> 32) as u32, prod as u32)
}

/// The raw Philox4x32-10 bijection.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut key = key;
    for round in 0..ROUNDS {
        let (hi0, lo0) = mulhilo(MUL0, ctr[0]);
        let (hi1, lo1) = mulhilo(MUL1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
        if round + 1 < ROUNDS {
            key[0] = key[0].wrapping_add(WEYL0);
            key[1] = key[1].wrapping_add(WEYL1);
        }
    }
    ctr
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Philox {
    key: [u32; 2],
    counter: [u32; 4],
    block: [u32; 4],
    used: usize,
}

impl Philox {
    pub fn new(key: [u32; 2], counter: [u32; 4]) -> Self {
        Self {
            key,
            counter,
            block: [0; 4],
            used: 4,
        }
    }

    /// Stream for chain `index` initialized in frame `frame` under a global `seed`.
    pub fn for_chain(seed: u64, index: u64, frame: u32) -> Self {
        let key = [index as u32, (index >> 32) as u32 ^ seed as u32];
        Self::new(key, [0, 0, frame, (seed >> 32) as u32])
    }

    /// Auxiliary stream `tag` (bootstrap passes, pixel samplers) disjoint from
    /// chain streams by its counter high word.
    pub fn for_tag(seed: u64, tag: u32, index: u64) -> Self {
        let key = [index as u32, (index >> 32) as u32 ^ seed as u32];
        Self::new(key, [0, 0, tag | 0x8000_0000, (seed >> 32) as u32])
    }

    fn refill(&mut self) {
        self.block = philox4x32_10(self.counter, self.key);
        let (lo, carry) = self.counter[0].overflowing_add(1);
        self.counter[0] = lo;
        if carry {
            self.counter[1] = self.counter[1].wrapping_add(1);
        }
        self.used = 0;
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            self.refill();
        }
        let v = self.block[self.used];
        self.used += 1;
        v
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let hi = u64::from(self.next_u32());
        let lo = u64::from(self.next_u32());
        (hi << 32) | lo
    }

    /// Uniform on [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exp(rate) by inversion. `rate` must be positive.
    #[inline]
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.uniform()).ln() / rate
    }

    /// A pair of independent standard normals (Box-Muller).
    #[inline]
    pub fn normal_pair(&mut self) -> [f64; 2] {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        [r * c, r * s]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors published with the Random123 reference implementation.
    #[test]
    fn known_answers() {
        assert_eq!(
            philox4x32_10([0; 4], [0; 2]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = Philox::for_chain(7, 3, 0);
        let mut b = Philox::for_chain(7, 3, 0);
        let mut c = Philox::for_chain(7, 4, 0);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
        let mut t = Philox::for_tag(7, 0, 3);
        assert_ne!(t.next_u64(), xs[0]);
    }

    #[test]
    fn counter_carries_into_second_word() {
        let mut rng = Philox::new([1, 2], [u32::MAX, 0, 0, 0]);
        rng.next_u32();
        assert_eq!(rng.counter, [0, 1, 0, 0]);
    }

    #[test]
    fn uniform_moments() {
        let mut rng = Philox::for_chain(1, 0, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (1.0f64 / 12.0).sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Philox::for_chain(2, 0, 0);
        let n = 50_000;
        let (mut s1, mut s2, mut cross) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let [a, b] = rng.normal_pair();
            s1 += a + b;
            s2 += a * a + b * b;
            cross += a * b;
        }
        let m = 2.0 * n as f64;
        assert!((s1 / m).abs() < 4.0 / m.sqrt());
        assert!((s2 / m - 1.0).abs() < 4.0 * 2f64.sqrt() / m.sqrt());
        assert!((cross / n as f64).abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn exponential_mean() {
        let mut rng = Philox::for_chain(3, 0, 0);
        let n = 100_000;
        let rate = 4.0;
        let mean = (0..n).map(|_| rng.exponential(rate)).sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() < 3.0 * 0.25 / (n as f64).sqrt());
    }
}
