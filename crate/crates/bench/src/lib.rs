//! Shared fixtures for the pipeline benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bcr_core::backbone::{fit_gmm_em, GmmBackbone};
use bcr_core::data::{EncodedMatrix, Target};

/// Uniform random point cloud in [-scale, scale]^d.
pub fn random_points(n: usize, d: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.gen_range(-scale..scale))
}

/// Two-cluster binary-classification matrix: class c centered at (+-2, +-2).
pub fn two_cluster(n: usize, d: usize, seed: u64) -> EncodedMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let center = if c == 0 { -2.0 } else { 2.0 };
        for j in 0..d {
            values[[i, j]] = center + rng.gen_range(-1.0..1.0);
        }
        labels.push(c);
    }
    EncodedMatrix { values, target: Target::Classes(labels) }
}

/// Frozen class-conditional Gaussian-mixture backbone over `real`.
pub fn fitted_backbone(real: &EncodedMatrix, t_steps: usize, seed: u64) -> GmmBackbone {
    let labels = match &real.target {
        Target::Classes(l) => l.clone(),
        _ => panic!("fixture is classification-only"),
    };
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut mixtures = Vec::new();
    for c in 0..n_classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let mut sub = Array2::zeros((idx.len(), real.dim()));
        for (k, &i) in idx.iter().enumerate() {
            sub.row_mut(k).assign(&real.values.row(i));
        }
        mixtures.push(fit_gmm_em(&sub, 2, seed, 100, 1e-6).expect("EM fit"));
    }
    GmmBackbone::new_class_conditional(mixtures, t_steps)
}
