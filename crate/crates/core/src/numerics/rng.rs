use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// Seeded generator. Backed by ChaCha8 (`rand_chacha`), seeded with
/// `seed_from_u64`, so draw sequences are fixed across platforms.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent generator for a named sub-stream of the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = self.inner.sample(StandardNormal);
        mean + std * z
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = self.normal(0.0, std));
        t
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = self.uniform(lo, hi));
        t
    }

    /// He/MSRA initialization for a `fan_in × fan_out` weight.
    pub fn he(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.normal_tensor(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
