//! Seeded randomness. Every sampler in the crate takes an explicit `&mut Rng`.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child generator, advancing the parent.
pub fn split(rng: &mut Rng) -> Rng {
    ChaCha8Rng::seed_from_u64(rng.next_u64())
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(n, rng)).expect("normal_tensor: zero extent")
}

pub fn uniform(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

pub fn bernoulli(p: f64, rng: &mut Rng) -> bool {
    rng.random::<f64>() < p
}

pub fn index(n: usize, rng: &mut Rng) -> usize {
    rng.random_range(0..n)
}
