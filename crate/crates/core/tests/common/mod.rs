#![allow(dead_code)]

use proxforge::arch::{ArchConfig, AutoformerArch, PitArch};
use proxforge::stats::{BatchSpec, CaptureMode, LayerStatistics, NetworkStatistics};
use proxforge::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, gaussian(rng, r * c, scale)).unwrap()
}

/// A statistics bundle with independent Gaussian entries. When
/// `mirror_mlp` is set, the second MLP matrix (and its gradient) reuses the
/// values of the first, transposed in shape only.
pub fn random_bundle(rng: &mut impl Rng, mirror_mlp: bool) -> NetworkStatistics {
    let depth = rng.random_range(1..=4);
    let d = rng.random_range(2..=10);
    let w = rng.random_range(2..=10);
    let h = rng.random_range(2..=20);
    let t = rng.random_range(2..=6);
    let layers = (0..depth)
        .map(|_| {
            let fc1 = random_matrix(rng, d, h, 0.05);
            let fc1g = random_matrix(rng, d, h, 1e-3);
            let (fc2, fc2g) = if mirror_mlp {
                (
                    Tensor::matrix(h, d, fc1.data().to_vec()).unwrap(),
                    Tensor::matrix(h, d, fc1g.data().to_vec()).unwrap(),
                )
            } else {
                (
                    random_matrix(rng, h, d, 0.05),
                    random_matrix(rng, h, d, 1e-3),
                )
            };
            LayerStatistics {
                msa_weights: vec![
                    random_matrix(rng, d, 3 * w, 0.05),
                    random_matrix(rng, w, d, 0.05),
                ],
                msa_weight_grads: vec![
                    random_matrix(rng, d, 3 * w, 1e-3),
                    random_matrix(rng, w, d, 1e-3),
                ],
                msa_act: random_matrix(rng, t, d, 1.0),
                msa_act_grad: random_matrix(rng, t, d, 1e-2),
                mlp_weights: vec![fc1, fc2],
                mlp_weight_grads: vec![fc1g, fc2g],
                mlp_act: random_matrix(rng, t, h, 1.0),
                mlp_act_grad: random_matrix(rng, t, h, 1e-2),
            }
        })
        .collect::<Vec<_>>();
    NetworkStatistics {
        config: toy_autoformer(layers.len()),
        layers,
        capture_mode: CaptureMode::Standard,
        seed: 0,
        scale: 24,
        batch: BatchSpec::default(),
    }
}

/// Off-table AutoFormer shape for desk-scale checks: hidden 192 / depth `depth`.
pub fn toy_autoformer(depth: usize) -> ArchConfig {
    ArchConfig::Autoformer(AutoformerArch {
        hidden_dim: 192,
        depth,
        mlp_ratio: vec![3.5; depth],
        num_heads: vec![3; depth],
        qkv_dim: 192,
    })
}

pub fn toy_pit() -> ArchConfig {
    ArchConfig::Pit(PitArch {
        base_dim: 16,
        mlp_ratio: 2,
        num_heads: [2, 4, 2],
        depth: [1, 1, 1],
        patch_size: 16,
    })
}

pub fn tiny_batch() -> BatchSpec {
    BatchSpec {
        batch_size: 2,
        image_side: 8,
        channels: 3,
        patch_size: 4,
        num_classes: 5,
    }
}
