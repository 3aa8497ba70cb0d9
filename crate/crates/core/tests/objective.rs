use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsegen::autodiff::Graph;
use sparsegen::config::TrainConfig;
use sparsegen::gaussians::{Gaussian3D, GaussianSet};
use sparsegen::image::Image;
use sparsegen::objective::{
    multilayer_loss, offset_reg, offset_reg_node, opacity_loss, recon_loss, recon_loss_node, LossBreakdown,
    PerceptualProxy,
};
use sparsegen::Error;

fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..0.9)).collect())
}

#[test]
fn recon_examples() {
    let proxy = PerceptualProxy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = random_image(&mut rng, 16, 16);
    assert_eq!(recon_loss(&proxy, &[t.clone()], &[t.clone()]).unwrap(), (0.0, 0.0));
    let shifted = Image::new(16, 16, t.data.iter().map(|v| v + 0.1).collect());
    let (l2, perc) = recon_loss(&proxy, &[shifted], &[t.clone()]).unwrap();
    assert!((l2 - 0.01).abs() < 1e-6, "{l2}");
    assert!(perc > 0.0);
    assert!(recon_loss(&proxy, &[Image::filled(8, 8, 0.0)], &[t]).is_err());
}

#[test]
fn tape_loss_matches_plain_loss() {
    let proxy = PerceptualProxy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random_image(&mut rng, 16, 16), random_image(&mut rng, 16, 16));
    let mut g = Graph::new();
    let pred = g.input(a.data.clone(), &[256, 3]);
    let (l2, perc) = recon_loss_node(&mut g, &proxy, pred, &b);
    let (l2_ref, perc_ref) = recon_loss(&proxy, &[a], &[b]).unwrap();
    assert!((f64::from(g.scalar(l2)) - l2_ref).abs() < 1e-5 * l2_ref.max(1.0));
    assert!((f64::from(g.scalar(perc)) - perc_ref).abs() < 1e-4 * perc_ref.max(1e-3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn perceptual_distance_is_symmetric(seed in any::<u64>()) {
        let proxy = PerceptualProxy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_image(&mut rng, 16, 16), random_image(&mut rng, 16, 16));
        let (ab, ba) = (proxy.distance(&a, &b).unwrap(), proxy.distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn offset_reg_gradient_vanishes_inside_ball(seed in any::<u64>(), delta in 0.05f32..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let anchors: Vec<f32> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mu = anchors.clone();
        for row in mu.chunks_mut(3) {
            let dir: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let len = dir.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
            let r = rng.random_range(0.0..0.95) * delta;
            for k in 0..3 {
                row[k] += dir[k] / len * r;
            }
        }
        let mut g = Graph::new();
        let m = g.leaf(mu.clone(), &[n, 3]);
        let a = g.input(anchors.clone(), &[n, 3]);
        let loss = offset_reg_node(&mut g, m, a, delta);
        prop_assert_eq!(g.scalar(loss), 0.0);
        let grads = g.backward(loss);
        prop_assert!(grads.of(m).map_or(true, |gm| gm.iter().all(|v| *v == 0.0)));
        // central differences agree: nothing moves for a small nudge
        let h = 1e-4 * delta;
        let eval = |mu: &[f32]| {
            let set = GaussianSet::with_provenance(
                mu.chunks(3).map(|p| Gaussian3D { mu: [p[0], p[1], p[2]], ..Default::default() }).collect(),
                (0..n as u32).collect(),
            );
            offset_reg(&set, &anchors, f64::from(delta)).unwrap()
        };
        for i in 0..n * 3 {
            let mut plus = mu.clone();
            let mut minus = mu.clone();
            plus[i] += h;
            minus[i] -= h;
            prop_assert_eq!((eval(&plus) - eval(&minus)) / (2.0 * f64::from(h)), 0.0);
        }
    }
}

fn single(offset: [f32; 3]) -> GaussianSet {
    GaussianSet::with_provenance(
        vec![Gaussian3D {
            mu: offset,
            ..Default::default()
        }],
        vec![0],
    )
}

#[test]
fn offset_reg_hand_cases() {
    let refs = [0.0f32; 3];
    assert_eq!(offset_reg(&single([0.0; 3]), &refs, 0.1).unwrap(), 0.0);
    assert!((offset_reg(&single([1.1, 0.0, 0.0]), &refs, 0.1).unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(offset_reg(&single([0.0, 0.5, 0.0]), &refs, 0.5).unwrap(), 0.0);
    assert!(matches!(
        offset_reg(&GaussianSet::new(vec![Gaussian3D::default()]), &refs, 0.1),
        Err(Error::MissingProvenance)
    ));
}

#[test]
fn opacity_cases() {
    assert_eq!(opacity_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    assert_eq!(opacity_loss(&[0.0; 8], &[1.0; 8]).unwrap(), 1.0);
    assert_eq!(opacity_loss(&[0.0, 0.0, 1.0, 1.0], &[1.0; 4]).unwrap(), 0.5);
    assert!(opacity_loss(&[0.0; 3], &[0.0; 4]).is_err());
}

#[test]
fn multilayer_is_mean_over_intermediate_layers() {
    let cfg = TrainConfig::default();
    let proxy = PerceptualProxy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let targets: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 16, 16)).collect();
    let layers: Vec<Vec<Image>> = (0..5)
        .map(|_| (0..3).map(|_| random_image(&mut rng, 16, 16)).collect())
        .collect();
    let got = multilayer_loss(&cfg, &proxy, &layers, &targets).unwrap();
    let mut want = 0.0;
    for renders in &layers[..4] {
        let mut l2 = 0.0;
        let mut perc = 0.0;
        for (r, t) in renders.iter().zip(&targets) {
            l2 += r.data.iter().zip(&t.data).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>() / 768.0;
            perc += proxy.distance(r, t).unwrap();
        }
        want += (l2 + f64::from(cfg.lambda_perc) * perc) / 3.0;
    }
    want /= 4.0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    let two = &layers[..2];
    let (l2, perc) = recon_loss(&proxy, &two[0], &targets).unwrap();
    assert_eq!(
        multilayer_loss(&cfg, &proxy, two, &targets).unwrap(),
        l2 + f64::from(cfg.lambda_perc) * perc
    );

    let perfect = vec![targets.clone(), targets.clone(), layers[0].clone()];
    assert_eq!(multilayer_loss(&cfg, &proxy, &perfect, &targets).unwrap(), 0.0);
}

#[test]
fn total_is_linear_in_each_weight() {
    let base = TrainConfig::default();
    let parts = (0.3, 0.2, 0.05, 0.7, 0.4);
    let total = |cfg: &TrainConfig| LossBreakdown::new(cfg, parts.0, parts.1, parts.2, parts.3, parts.4).total;
    let t0 = total(&base);
    let cases: [(fn(&mut TrainConfig) -> &mut f32, f64); 5] = [
        (|c| &mut c.lambda_l2, parts.0),
        (|c| &mut c.lambda_perc, parts.1),
        (|c| &mut c.lambda_occ, parts.2),
        (|c| &mut c.lambda_reg, parts.3),
        (|c| &mut c.lambda_inter, parts.4),
    ];
    for (field, value) in cases {
        let mut cfg = base.clone();
        let old = *field(&mut cfg);
        *field(&mut cfg) = old * 3.0;
        let expected = t0 + (f64::from(old * 3.0) - f64::from(old)) * value;
        assert!((total(&cfg) - expected).abs() < 1e-9);
    }
    let b = LossBreakdown::new(&base, 0.0, 0.0, 0.0, 0.0, 0.0);
    assert!(b.is_finite() && b.total == 0.0);
}
