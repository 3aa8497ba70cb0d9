#![allow(dead_code)]

pub mod oracles;

use rand::Rng;

use sparsegen::config::TrainConfig;
use sparsegen::data::{load_scenes, make_synthetic_dataset, Scene, SyntheticSpec};
use sparsegen::gaussians::{Gaussian3D, GaussianSet};
use sparsegen::geometry::CameraPose;

pub fn unit_quaternion(rng: &mut impl Rng) -> [f32; 4] {
    loop {
        let q: [f32; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 1e-2 {
            return q.map(|v| v / n);
        }
    }
}

/// Up to `max_n` Gaussians in front of [`small_pose`].
pub fn small_scene(rng: &mut impl Rng, max_n: usize) -> GaussianSet {
    let n = rng.random_range(1..=max_n);
    GaussianSet::new(
        (0..n)
            .map(|_| Gaussian3D {
                mu: [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(2.0..4.0),
                ],
                scale: std::array::from_fn(|_| rng.random_range(0.03..0.25)),
                rot: unit_quaternion(rng),
                color: std::array::from_fn(|_| rng.random()),
                opacity: rng.random_range(0.05..0.99),
            })
            .collect(),
    )
}

/// Identity camera for 16×16 images.
pub fn small_pose() -> CameraPose {
    CameraPose::identity(24.0, 24.0, 8.0, 8.0)
}

/// Tiny model on 16×16 images; trains in milliseconds per step.
pub fn micro_config() -> TrainConfig {
    let mut cfg = TrainConfig::tiny();
    cfg.image_height = 16;
    cfg.image_width = 16;
    cfg.num_queries = 8;
    cfg.gaussians_per_query = 2;
    cfg.hidden_dim = 16;
    cfg.attention_heads = 2;
    cfg.depth_samples = 4;
    cfg.n_freq = 3;
    cfg.views = 3;
    cfg.noisy_views = 2;
    cfg.batch_size = 2;
    cfg
}

pub fn synthetic_scenes(dir: &std::path::Path, n_scenes: usize, n_views: usize, res: usize, seed: u64) -> Vec<Scene> {
    make_synthetic_dataset(
        dir,
        &SyntheticSpec {
            n_scenes,
            gaussians_per_scene: 48,
            n_views,
            resolution: res,
            seed,
        },
    )
    .unwrap();
    load_scenes(dir, Some((res, res))).unwrap()
}
