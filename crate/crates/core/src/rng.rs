//! Seeded, counter-based randomness.
//!
//! The generator is SplitMix64: a 64-bit counter advanced by a fixed odd
//! constant, hashed through a finalizer. Identical seed + identical call
//! sequence gives an identical stream on every platform. Floats are derived
//! from the high 53 (or 24) bits, and normal deviates use an Irwin-Hall
//! 12-sum, so the whole stream is reproducible bit-for-bit at a given
//! precision without touching libm. Run metadata records the algorithm as
//! `splitmix64/irwin-hall12`.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RNG_ALGORITHM: &str = "splitmix64/irwin-hall12";

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    counter: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Independent child stream. Children with distinct labels never collide
    /// with each other or with the parent stream.
    pub fn derive(&self, label: u64) -> Self {
        Self::new(mix(self.seed ^ mix(label.wrapping_mul(GOLDEN_GAMMA).wrapping_add(1))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Rebuild a stream at an exact position (checkpoint restore).
    pub fn restore(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) without modulo bias (rejection sampling).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Approximately standard normal: sum of 12 uniforms minus 6.
    /// Exactly reproducible everywhere since it uses only adds.
    pub fn next_normal(&mut self) -> f64 {
        let mut acc = 0.0f64;
        for _ in 0..12 {
            acc += self.next_f64();
        }
        acc - 6.0
    }

    pub fn normal_tensor<F: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::from_f64(mean + std * self.next_normal()))
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape/data length agree by construction")
    }

    pub fn uniform_tensor<F: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::from_f64(lo + (hi - lo) * self.next_f64()))
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape/data length agree by construction")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// k distinct indices out of n, in shuffled order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx
    }
}
