//! Counter-based, splittable random streams.
//!
//! Every source of randomness in the simulator is an [`RngStream`]. A stream
//! is identified by a 64-bit key; drawing the n-th value hashes `(key, n)`,
//! so a stream's output depends only on its key and the draw index, never on
//! what other streams did in between. Child streams are derived by hashing a
//! label or index into the key, which gives each (purpose, client, epoch,
//! cell) its own independent sequence regardless of evaluation order.
//!
//! Not cryptographically secure; statistical quality only.

use std::f64::consts::PI;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. Bijective, good avalanche.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string, used to fold labels into stream keys.
#[inline]
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            key: mix(seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Derives an independent stream for a named purpose.
    pub fn child(&self, label: &str) -> Self {
        RngStream {
            key: mix(self.key ^ hash_label(label)),
            counter: 0,
        }
    }

    /// Derives an independent stream for an index (client id, epoch, ...).
    pub fn child_idx(&self, idx: u64) -> Self {
        RngStream {
            key: mix(self.key.wrapping_add(GOLDEN) ^ mix(idx.wrapping_add(1))),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix(self.key.wrapping_add(c.wrapping_mul(GOLDEN)))
    }

    /// Uniform in the open interval (0, 1); safe as a log() argument.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Panics if n == 0.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Zero-mean Laplace with the given scale b (variance 2 b^2).
    pub fn laplace(&mut self, scale: f64) -> f64 {
        let u = self.uniform() - 0.5;
        -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
