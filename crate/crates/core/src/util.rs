//! Deterministic randomness and bit-stable parallel reduction.
//!
//! Every stochastic choice in the pipeline is keyed by an explicit seed chain
//! (`derive_seed`) rather than by shared generator state, so runs are
//! reproducible, resumable mid-training, and independent of thread count.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

/// Mixes a list of integers into a single seed (splitmix64 chain).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Seeded generator with the handful of draw primitives the pipeline needs.
pub struct DetRng {
    inner: ChaCha12Rng,
}

impl DetRng {
    pub fn new(seed: u64) -> DetRng {
        DetRng {
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn from_parts(parts: &[u64]) -> DetRng {
        DetRng::new(derive_seed(parts))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (one draw per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// First `n` elements of a Fisher-Yates shuffle of `0..len`.
    pub fn partial_shuffle_indices(&mut self, len: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        let n = n.min(len);
        for i in 0..n {
            let j = i + self.below(len - i);
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    }
}

/// Pairwise (tree) sum; bit-stable for a fixed input order.
pub fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            tree_sum(&xs[..mid]) + tree_sum(&xs[mid..])
        }
    }
}

/// Splits `0..n` into fixed chunks, maps them in parallel, and returns the
/// results in chunk order. Chunk boundaries depend only on `n` and
/// `chunk_size`, so the output (and any fold over it) is identical for any
/// worker count.
pub fn par_chunks<T, F>(n: usize, chunk_size: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Send + Sync,
{
    assert!(chunk_size > 0);
    let ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(chunk_size)
        .map(|s| s..(s + chunk_size).min(n))
        .collect();
    ranges.into_par_iter().map(f).collect()
}

/// Sum of per-chunk partial values, reduced in chunk order.
pub fn par_chunk_sum<F>(n: usize, chunk_size: usize, f: F) -> f64
where
    F: Fn(std::ops::Range<usize>) -> f64 + Send + Sync,
{
    let partials = par_chunks(n, chunk_size, f);
    tree_sum(&partials)
}

/// Adds `src` into `dst` elementwise.
pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
