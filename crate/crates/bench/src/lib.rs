//! Shared fixtures for the criterion benchmarks.

use sfedkd::distill::TeacherEnsemble;
use sfedkd::model::init_params;
use sfedkd::{ClassDistribution, ModelParams};

/// A deterministic feature batch of `batch × dim` values in `[-1, 1]`.
pub fn batch(batch: usize, dim: usize) -> (Vec<f64>, Vec<usize>, usize) {
    let x = (0..batch * dim)
        .map(|i| ((i * 7919) % 2001) as f64 / 1000.0 - 1.0)
        .collect();
    let classes = 10;
    let y = (0..batch).map(|i| i % classes).collect();
    (x, y, classes)
}

pub fn model(dims: &[usize], seed: u64) -> ModelParams {
    init_params(dims, seed).expect("valid dims")
}

/// `k` teachers, each holding two classes out of `classes`.
pub fn ensemble(dims: &[usize], k: usize) -> TeacherEnsemble {
    let classes = *dims.last().expect("dims");
    let teachers = (0..k).map(|i| model(dims, 100 + i as u64)).collect();
    let dists = (0..k)
        .map(|i| {
            let mut w = vec![0.0; classes];
            w[(2 * i) % classes] = 1.0;
            w[(2 * i + 1) % classes] = 1.0;
            ClassDistribution::from_weights(w).expect("valid weights")
        })
        .collect();
    TeacherEnsemble::new(teachers, dists, (0..k).collect()).expect("consistent ensemble")
}
