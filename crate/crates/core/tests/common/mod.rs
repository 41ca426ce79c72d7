#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tmcl_core::datastream::{AugmentationSpec, DataSpec};
use tmcl_core::model::ModelConfig;
use tmcl_core::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let v = (0..rows * cols).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, v).unwrap()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.dims().0).map(|i| t.row(i).to_vec()).collect()
}

pub fn tiny_model(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        hidden_dim: 8,
        num_layers: 3,
        d_model: 6,
        d_proj: 6,
        supcon_dim: 4,
    }
}

/// Small, easily separable data: 4 classes in 6 dimensions.
pub fn tiny_data() -> DataSpec {
    DataSpec {
        num_classes: 4,
        dim: 6,
        class_subspace_dim: 3,
        train_per_class: 40,
        test_per_class: 10,
        anchor_scale: 4.0,
        class_std: 0.3,
        nuisance_std: 0.5,
        noise_std: 0.1,
        min_separation: 4.0,
        augmentation: AugmentationSpec {
            noise_std: 0.1,
            mask_prob: 0.0,
            scale_min: 0.9,
            scale_max: 1.1,
        },
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt() + 1e-12)
}
