mod common;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsegen::gaussians::{Gaussian3D, GaussianSet};
use sparsegen::geometry::CameraPose;
use sparsegen::gradcheck::gradient_check;
use sparsegen::splatter::{render, render_backward, render_params, RenderSettings};

use common::{small_pose, small_scene};

fn flat(gs: &GaussianSet) -> Vec<f64> {
    gs.to_flat().into_iter().map(f64::from).collect()
}

#[test]
fn two_layer_compositing() {
    // pixel (5, 3) has center (5.5, 3.5)
    let pose = CameraPose::identity(10.0, 10.0, 0.0, 0.0);
    let c1 = [0.9, 0.1, 0.3];
    let c2 = [0.2, 0.8, 0.5];
    let front = Gaussian3D {
        mu: [0.55, 0.35, 1.0],
        scale: [0.05; 3],
        color: c1,
        opacity: 0.6,
        ..Default::default()
    };
    let back = Gaussian3D {
        mu: [1.1, 0.7, 2.0],
        scale: [0.1; 3],
        color: c2,
        opacity: 1.0,
        ..Default::default()
    };
    // Input order must not matter.
    for set in [vec![front.clone(), back.clone()], vec![back, front]] {
        let img = render(&GaussianSet::new(set), &pose, 8, 8);
        let px = img.pixel(5, 3);
        for k in 0..3 {
            let want = 0.6 * f64::from(c1[k]) + 0.4 * f64::from(c2[k]);
            assert!((f64::from(px[k]) - want).abs() < 1e-6, "{px:?}");
        }
    }
}

#[test]
fn composited_weight_never_exceeds_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rs = RenderSettings::default();
    for _ in 0..1000 {
        let mut gs = small_scene(&mut rng, 24);
        for g in &mut gs.gaussians {
            g.color = [1.0; 3];
        }
        let out = render_params(&flat(&gs), &small_pose(), 16, 16, &rs);
        for (pix, a) in out.alpha.iter().enumerate() {
            // with white colors each channel is Σ T_i w_i
            let total = out.rgb[pix * 3];
            assert!((0.0..=1.0 + 1e-12).contains(&total), "{total}");
            assert!((total - a).abs() < 1e-12);
        }
    }
}

#[test]
fn transmittance_only_decreases_as_splats_are_added() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rs = RenderSettings::default();
    for _ in 0..20 {
        let mut gs = small_scene(&mut rng, 16).gaussians;
        gs.sort_by(|a, b| a.mu[2].total_cmp(&b.mu[2]));
        let mut prev = vec![0.0; 256];
        for k in 1..=gs.len() {
            let out = render_params(&flat(&GaussianSet::new(gs[..k].to_vec())), &small_pose(), 16, 16, &rs);
            for (a, p) in out.alpha.iter().zip(&prev) {
                assert!(*a >= p - 1e-12 && *a <= 1.0);
            }
            prev = out.alpha;
        }
    }
}

#[test]
fn input_order_is_canonicalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let gs = small_scene(&mut rng, 24);
        let mut shuffled = gs.gaussians.clone();
        shuffled.shuffle(&mut rng);
        let a = render(&gs, &small_pose(), 16, 16);
        let b = render(&GaussianSet::new(shuffled), &small_pose(), 16, 16);
        for (x, y) in a.rgb.iter().zip(&b.rgb) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn small_opacity_contribution_is_linear() {
    let rs = RenderSettings::default();
    let pose = small_pose();
    let at = |opacity: f32| {
        let g = Gaussian3D {
            mu: [0.0, 0.0, 3.0],
            scale: [0.2; 3],
            color: [0.4, 0.6, 0.8],
            opacity,
            ..Default::default()
        };
        let p = flat(&GaussianSet::new(vec![g]));
        (render_params(&p, &pose, 16, 16, &rs), p)
    };
    let pix = 8 * 16 + 8;
    let (a, p) = at(0.05);
    let (b, _) = at(0.1);
    for k in 0..3 {
        assert!((b.rgb[pix * 3 + k] - 2.0 * a.rgb[pix * 3 + k]).abs() < 1e-7);
    }
    // d C_k / d alpha from the analytic backward on channel 0
    let mut g_rgb = vec![0.0; 256 * 3];
    g_rgb[pix * 3] = 1.0;
    let grad = render_backward(&p, &pose, &a, &g_rgb, &vec![0.0; 256], &rs);
    let fd = (b.rgb[pix * 3] - a.rgb[pix * 3]) / 0.05;
    assert!((grad[13] - fd).abs() < 1e-6, "{} vs {fd}", grad[13]);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..4 {
        let n = rng.random_range(1..=8);
        let gs = small_scene(&mut rng, n);
        let r = gradient_check(&gs, &small_pose(), 16, 16, 1e-3);
        assert!(!r.non_finite);
        assert!(r.max_rel_error < 1e-2, "{r:?}");
    }
}

#[test]
fn diagnostics_count_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gs = small_scene(&mut rng, 10);
    gs.gaussians.push(Gaussian3D {
        mu: [0.0, 0.0, -1.0],
        ..Default::default()
    });
    gs.gaussians.push(Gaussian3D {
        mu: [50.0, 0.0, 2.0],
        ..Default::default()
    });
    let (_, d) = sparsegen::splatter::render_with_diagnostics(&gs, &small_pose(), 16, 16);
    assert_eq!(d.rendered + d.behind + d.offscreen + d.degenerate, gs.len());
    assert!(d.behind >= 1 && d.offscreen >= 1);
}
