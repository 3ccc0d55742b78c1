#![allow(dead_code)]

use conan::{ConanModel, Distribution, Embedding, ModelConfig, Split, Template, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn template(rng: &mut impl Rng, d: usize, n: usize, dist: Distribution) -> Template<f64> {
    let rows = (0..n)
        .map(|k| Embedding::new(gaussian(rng, d), format!("m{k}")))
        .collect();
    Template::new("t", "s", dist, Split::Test, rows).unwrap()
}

/// A seeded model with every parameter jittered, so the probe transform and
/// biases are not at their identity/zero starting points.
pub fn model(d: usize, heads: usize, seed: u64) -> ConanModel<f64> {
    let mut cfg = ModelConfig::new(d);
    cfg.heads = heads;
    let mut m = ConanModel::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xa5a5);
    let jittered = m
        .params()
        .iter()
        .map(|(_, _, t)| {
            let noise = gaussian(&mut r, t.len());
            let data = t.data().iter().zip(noise).map(|(v, e)| v + 0.1 * e).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    m.set_params(jittered).unwrap();
    m
}

pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
