use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::tensor::Tensor;

/// Deterministic random source: ChaCha8 counter-based stream plus Box-Muller
/// normals, so the draw sequence is identical across platforms for a given
/// seed and stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    chacha: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng {
            seed,
            chacha: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream sharing this generator's seed. Forks do not depend
    /// on how far the parent has advanced, so per-sample streams are stable.
    pub fn fork(&self, stream: u64) -> Self {
        let mut chacha = ChaCha8Rng::seed_from_u64(self.seed);
        chacha.set_stream(stream);
        Rng {
            seed: self.seed,
            chacha,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.chacha.next_u64()
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) without modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller; the pair is consumed in order so the
    /// sequence is reproducible.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| self.standard_normal()).collect();
        Tensor::new(shape, data).expect("shape/data length agree by construction")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Draw a tensor of i.i.d. standard normal entries.
pub fn gaussian(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    rng.normal_tensor(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let a = gaussian(&mut Rng::seed_from(7), vec![4, 3]);
        let b = gaussian(&mut Rng::seed_from(7), vec![4, 3]);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = gaussian(&mut Rng::seed_from(7), vec![8]);
        let b = gaussian(&mut Rng::seed_from(8), vec![8]);
        assert_ne!(a, b);
    }

    #[test]
    fn normal_moments_close_to_standard() {
        let mut rng = Rng::seed_from(42);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn fork_streams_are_independent_of_parent_position() {
        let mut parent = Rng::seed_from(3);
        let fork_before = parent.fork(5).next_u64();
        parent.next_u64();
        parent.next_u64();
        let fork_after = parent.fork(5).next_u64();
        assert_eq!(fork_before, fork_after);
        assert_ne!(parent.fork(5).next_u64(), parent.fork(6).next_u64());
    }

    #[test]
    fn below_stays_in_range_and_covers_values() {
        let mut rng = Rng::seed_from(11);
        let mut seen = [false; 5];
        for _ in 0..200 {
            seen[rng.below(5)] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }
}
