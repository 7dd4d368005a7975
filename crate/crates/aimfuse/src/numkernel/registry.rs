use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::Mat;

/// Shared context for every stochastic kernel: one seeded stream plus the
/// train/inference switch. Identical seed and identical op sequence give
/// bit-identical draws; nothing else in the kernel consumes randomness.
pub struct KernelRegistry {
    rng: ChaCha8Rng,
    training: bool,
}

impl KernelRegistry {
    pub fn new(seed: u64) -> Self {
        KernelRegistry {
            rng: ChaCha8Rng::seed_from_u64(seed),
            training: false,
        }
    }

    pub fn train_mode(seed: u64) -> Self {
        KernelRegistry {
            rng: ChaCha8Rng::seed_from_u64(seed),
            training: true,
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    /// Matrix with i.i.d. uniform(lo, hi) entries, row-major fill order.
    pub fn uniform_mat(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data_mut() {
            *v = self.rng.random_range(lo..hi);
        }
        m
    }

    /// Index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Inverted-scaling dropout mask: entries are 0 with probability `rate`,
    /// else 1/(1-rate). `rate` must lie in [0, 1).
    pub fn dropout_mask(&mut self, rows: usize, cols: usize, rate: f64) -> Result<Mat> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mut m = Mat::zeros(rows, cols);
        for v in m.data_mut() {
            *v = if self.rng.random::<f64>() < rate { 0.0 } else { keep_scale };
        }
        Ok(m)
    }
}

/// Deterministic seed derivation: mixes a master seed with stream tags so
/// independent consumers (per-epoch shuffles, per-drug neighbor draws, fold
/// workers) get decorrelated but reproducible streams.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut x = master ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        x ^= t.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        // splitmix64 finalizer
        let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}
