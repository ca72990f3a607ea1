//! Counter-based deterministic pseudo-random streams.
//!
//! Every random decision in the toolkit is keyed by explicit components
//! (global seed, epoch, sample index, view index, ...) folded into a
//! SplitMix64 counter stream. Identical components produce identical
//! streams on every platform and under any worker count.

/// SplitMix64 finalizer. Full-period bijection on u64.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A counter-based RNG stream keyed by explicit seed components.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    /// Derive a stream from an ordered list of seed components.
    pub fn from_parts(parts: &[u64]) -> Self {
        let mut key = 0x243F_6A88_85A3_08D3; // pi fractional bits
        for &p in parts {
            key = mix(key ^ mix(p));
        }
        RngStream { key, counter: 0 }
    }

    /// Stream for augmenting one view of one sample in one epoch.
    pub fn for_sample(global_seed: u64, epoch: u64, sample_index: u64, view_index: u64) -> Self {
        Self::from_parts(&[global_seed, epoch, sample_index, view_index])
    }

    /// Labeled sub-stream, e.g. `derive("shuffle")`.
    pub fn derive(&self, label: &str) -> Self {
        let mut key = self.key;
        for b in label.as_bytes() {
            key = mix(key ^ u64::from(*b));
        }
        RngStream { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key ^ mix(self.counter));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Uses the high-multiply trick; the bias
    /// for n << 2^64 is unobservable and the mapping is deterministic.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// k distinct indices drawn uniformly from 0..n, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
