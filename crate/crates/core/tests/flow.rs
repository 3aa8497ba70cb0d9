use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsegen::data::ring_poses;
use sparsegen::flow::{noise_views, sample_training_batch, FlowSampling};
use sparsegen::image::Image;
use sparsegen::Error;

fn vecs(n: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)> {
    let v = || prop::collection::vec(-2.0f32..2.0, n);
    (v(), v(), v(), v())
}

proptest! {
    #[test]
    fn endpoints_are_bit_exact(x in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
        let eps: Vec<f32> = x.iter().rev().copied().collect();
        prop_assert_eq!(noise_views(&x, 0.0, &eps), x.clone());
        prop_assert_eq!(noise_views(&x, 1.0, &eps), eps);
    }

    #[test]
    fn noising_is_affine((x1, x2, e1, e2) in vecs(32), t in 0.0f32..=1.0, c in -3.0f32..3.0) {
        let add = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| p + q).collect::<Vec<_>>();
        let scale = |a: &[f32]| a.iter().map(|p| c * p).collect::<Vec<_>>();
        let sum = noise_views(&add(&x1, &x2), t, &add(&e1, &e2));
        let parts = add(&noise_views(&x1, t, &e1), &noise_views(&x2, t, &e2));
        for (a, b) in sum.iter().zip(&parts) {
            prop_assert!((a - b).abs() < 1e-5);
        }
        let scaled = noise_views(&scale(&x1), t, &scale(&e1));
        for (a, b) in scaled.iter().zip(scale(&noise_views(&x1, t, &e1))) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn midpoint_value() {
    assert_eq!(noise_views(&[0.2], 0.5, &[0.8]), vec![0.5]);
}

fn scene(n: usize) -> (Vec<Image>, Vec<sparsegen::geometry::CameraPose>) {
    let images = (0..n).map(|i| Image::filled(4, 4, i as f32 / n as f32)).collect();
    (images, ring_poses(n, 10.0, 4, 4))
}

const DEFAULT_SAMPLING: FlowSampling = FlowSampling {
    views: 5,
    noisy: 3,
    p_drop: 0.0,
};

#[test]
fn three_of_five_are_noised_with_a_shared_t() {
    let (images, poses) = scene(8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let mut noisy_total = 0usize;
    for _ in 0..n {
        let b = sample_training_batch(&images, &poses, None, &DEFAULT_SAMPLING, &mut rng).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.present.iter().all(|p| *p));
        let noisy: Vec<f32> = b.t.iter().copied().filter(|t| *t > 0.0).collect();
        noisy_total += noisy.len();
        assert!(noisy.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(b.t.iter().filter(|t| **t == 0.0).count(), 5 - noisy.len());
        for i in 0..5 {
            if b.t[i] == 0.0 {
                assert_eq!(b.images[i], b.targets[i]);
            }
            assert!(images.contains(&b.targets[i]));
            assert!((0.0..=1.0).contains(&b.t[i]));
        }
    }
    let mean = noisy_total as f64 / n as f64;
    assert!((mean - 3.0).abs() < 1e-3, "{mean}");
}

#[test]
fn dropout_keeps_a_view() {
    let (images, poses) = scene(6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let heavy = FlowSampling { p_drop: 0.95, ..DEFAULT_SAMPLING };
    let mut dropped = 0;
    for _ in 0..2000 {
        let b = sample_training_batch(&images, &poses, None, &heavy, &mut rng).unwrap();
        assert!(!b.present_indices().is_empty());
        assert_eq!(b.targets.len(), 5);
        dropped += b.present.iter().filter(|p| !**p).count();
    }
    assert!(dropped > 0);
}

#[test]
fn reproducible_under_seed() {
    let (images, poses) = scene(7);
    let s = FlowSampling { p_drop: 0.3, ..DEFAULT_SAMPLING };
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = sample_training_batch(&images, &poses, None, &s, &mut rng).unwrap();
        (b.t, b.present, b.images)
    };
    assert_eq!(draw(42), draw(42));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seeds: Vec<u64> = (0..4).map(|_| rng.random()).collect();
    assert!(seeds.windows(2).any(|w| draw(w[0]) != draw(w[1])));
}

#[test]
fn too_few_views() {
    let (images, poses) = scene(4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        sample_training_batch(&images, &poses, None, &DEFAULT_SAMPLING, &mut rng),
        Err(Error::TooFewViews { have: 4, need: 5 })
    ));
}
