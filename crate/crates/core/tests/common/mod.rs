#![allow(dead_code)]

use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorformer::model::init_model;
use sensorformer::{Arch, Model, ModelConfig, Scalar, SequenceBatch};

/// d=8, 1 layer, L=6, n=3, k=5.
pub fn tiny_config(arch: Arch) -> ModelConfig {
    ModelConfig { n_dims: 3, d_model: 8, max_len: 6, layers: 1, heads: 2, bins: 5, arch, init_std: 0.5, ..Default::default() }
}

/// Fresh model with every tensor, including biases and layer-norm parameters, jittered so
/// no parameter sits at a special point.
pub fn jittered_model(config: &ModelConfig, seed: u64) -> Model<f64> {
    let mut m = init_model::<f64>(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    m
}

pub fn random_batch<S: Scalar>(batch: usize, len: usize, dims: usize, seed: u64) -> SequenceBatch<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * len * dims).map(|_| S::from_f64_lossy(rng.random::<f64>())).collect();
    SequenceBatch::new(data, batch, len, dims).unwrap()
}

/// Bin of `x` found by binary search over the exact rational edges `j / k`.
pub fn bin_oracle(x: f64, k: usize) -> usize {
    let xr = BigRational::from_float(x).expect("finite input");
    let kr = BigRational::from_float(k as f64).unwrap();
    let edge = |j: usize| BigRational::from_float(j as f64).unwrap() / kr.clone();
    // invariant: edge(lo) <= x, and either hi == k or edge(hi) > x
    let (mut lo, mut hi) = (0usize, k);
    if xr < edge(0) {
        return 0;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if edge(mid) <= xr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo.min(k - 1)
}

/// Weighted F1 from raw label lists, counting tp / fp / fn per class directly.
pub fn brute_force_weighted_f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let n = truth.len() as f64;
    let mut total = 0.0;
    for c in 0..classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fn_;
        let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        total += (tp + fn_) / n * f1;
    }
    total
}

pub fn bits<S: Scalar>(v: &[S]) -> Vec<u64> {
    v.iter().map(|x| x.as_f64().to_bits()).collect()
}
