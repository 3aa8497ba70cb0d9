mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsegen::gaussians::{Gaussian3D, GaussianSet};
use sparsegen::image::Image;
use sparsegen::metrics::{
    input_view_bias, median, psnr, ssim, time_reconstruction, timing_report, utilization, HISTOGRAM_BINS,
};
use sparsegen::objective::PerceptualProxy;
use sparsegen::Error;

use common::oracles;

fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect())
}

fn perturbed(rng: &mut impl Rng, img: &Image, amp: f32) -> Image {
    Image::new(
        img.width,
        img.height,
        img.data.iter().map(|v| (v + rng.random_range(-amp..amp)).clamp(0.0, 1.0)).collect(),
    )
}

#[test]
fn psnr_and_ssim_match_naive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (w, h) in [(16, 16), (23, 17), (8, 12), (5, 5)] {
        for _ in 0..5 {
            let a = random_image(&mut rng, w, h);
            let b = perturbed(&mut rng, &a, 0.3);
            let (p, q) = (psnr(&a, &b).unwrap(), oracles::psnr(&a, &b));
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
            let (s, t) = (ssim(&a, &b).unwrap(), oracles::ssim(&a, &b));
            assert!((s - t).abs() < 1e-9, "{w}x{h}: {s} vs {t}");
        }
    }
}

#[test]
fn metric_examples() {
    let zero = Image::filled(8, 8, 0.0);
    let tenth = Image::filled(8, 8, 0.1);
    assert!((psnr(&zero, &tenth).unwrap() - 20.0).abs() < 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 16, 16);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!(psnr(&a, &zero).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), w in 4usize..20, h in 4usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, w, h);
        let b = random_image(&mut rng, w, h);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn bias_partitions_are_disjoint_and_exhaustive(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..n {
            idx.swap(i, rng.random_range(i..n));
        }
        let cond = &idx[..k];
        let targets: Vec<Image> = (0..n).map(|_| random_image(&mut rng, 8, 8)).collect();
        let renders: Vec<Image> = targets.iter().map(|t| perturbed(&mut rng, t, 0.2)).collect();
        let r = input_view_bias(&renders, &targets, cond, &PerceptualProxy::default()).unwrap();
        let mut all = r.cond_views.clone();
        all.extend(&r.novel_views);
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(r.cond_views.iter().all(|i| !r.novel_views.contains(i)));
    }
}

#[test]
fn bias_matches_per_view_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let proxy = PerceptualProxy::default();
    let targets: Vec<Image> = (0..6).map(|_| random_image(&mut rng, 12, 12)).collect();
    let renders: Vec<Image> = targets.iter().map(|t| perturbed(&mut rng, t, 0.25)).collect();
    let cond = [4, 1];
    let r = input_view_bias(&renders, &targets, &cond, &proxy).unwrap();
    let mean = |idx: &[usize], f: &dyn Fn(usize) -> f64| idx.iter().map(|&i| f(i)).sum::<f64>() / idx.len() as f64;
    let novel = [0, 2, 3, 5];
    let p = |i: usize| oracles::psnr(&renders[i], &targets[i]);
    let s = |i: usize| oracles::ssim(&renders[i], &targets[i]);
    assert!((r.psnr.cond - mean(&cond, &p)).abs() < 1e-9);
    assert!((r.psnr.novel - mean(&novel, &p)).abs() < 1e-9);
    assert!((r.psnr.delta - (mean(&cond, &p) - mean(&novel, &p))).abs() < 1e-9);
    assert!((r.ssim.delta - (mean(&cond, &s) - mean(&novel, &s))).abs() < 1e-9);
    assert_eq!(r.cond_views, vec![1, 4]);
    assert_eq!(r.psnr.excluded, 0);
}

#[test]
fn perfect_conditioning_views_show_positive_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let targets: Vec<Image> = (0..5).map(|_| random_image(&mut rng, 12, 12)).collect();
    let mut renders = targets.clone();
    for r in &mut renders[2..] {
        *r = perturbed(&mut rng, r, 0.3);
    }
    let r = input_view_bias(&renders, &targets, &[0, 1], &PerceptualProxy::default()).unwrap();
    // infinite PSNR on both conditioning views leaves the partition at +∞
    assert_eq!(r.psnr.excluded, 2);
    assert!(r.psnr.delta > 0.0);
    assert!(r.ssim.delta > 0.0);
    assert!(r.perceptual.delta < 0.0);
}

#[test]
fn empty_partitions_are_errors() {
    let img = vec![Image::filled(4, 4, 0.5); 3];
    let proxy = PerceptualProxy::default();
    assert!(matches!(
        input_view_bias(&img, &img, &[], &proxy),
        Err(Error::EmptyPartition("conditioning"))
    ));
    assert!(matches!(
        input_view_bias(&img, &img, &[0, 1, 2], &proxy),
        Err(Error::EmptyPartition("novel"))
    ));
    assert!(input_view_bias(&img, &img, &[7], &proxy).is_err());
}

fn random_set(rng: &mut impl Rng, n_queries: u32, k: usize) -> GaussianSet {
    let mut gs = Vec::new();
    let mut prov = Vec::new();
    for q in 0..n_queries {
        for _ in 0..k {
            gs.push(Gaussian3D {
                mu: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
                opacity: rng.random(),
                ..Default::default()
            });
            prov.push(q);
        }
    }
    GaussianSet::with_provenance(gs, prov)
}

#[test]
fn utilization_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let gs = random_set(&mut rng, 7, 5);
        let tau = rng.random_range(0.0..0.5);
        let r = utilization(&gs, tau, None);
        let (hist, frac, per_query) = oracles::utilization(&gs, tau, HISTOGRAM_BINS);
        assert_eq!(r.histogram, hist);
        assert!((r.low_opacity_fraction - frac).abs() < 1e-12);
        assert_eq!(r.query_centers.len(), per_query.len());
        for ((c, rad), (oc, orad)) in r.query_centers.iter().zip(&r.locality_radius).zip(&per_query) {
            assert!((0..3).all(|a| (c[a] - oc[a]).abs() < 1e-9));
            assert!((rad - orad).abs() < 1e-9);
        }
        assert_eq!(r.histogram.iter().sum::<u64>(), gs.len() as u64);
    }
}

#[test]
fn utilization_examples() {
    let n = 12;
    let opaque = GaussianSet::new(vec![
        Gaussian3D {
            opacity: 1.0,
            ..Default::default()
        };
        n
    ]);
    let r = utilization(&opaque, 1.0 / 255.0, None);
    assert_eq!(r.histogram[HISTOGRAM_BINS - 1], n as u64);
    assert_eq!(r.low_opacity_fraction, 0.0);

    let same = GaussianSet::with_provenance(
        vec![
            Gaussian3D {
                mu: [0.3, -0.2, 2.0],
                ..Default::default()
            };
            4
        ],
        vec![0; 4],
    );
    let r = utilization(&same, 0.5, Some(&common::small_pose()));
    assert_eq!(r.locality_radius, vec![0.0]);
    assert_eq!(r.query_projections.as_ref().unwrap().len(), 1);
}

#[test]
fn timing_summaries() {
    let one = timing_report(vec![0.25]);
    assert_eq!((one.median_s, one.min_s, one.max_s), (0.25, 0.25, 0.25));
    assert_eq!(median(&[3.0, 1.0, 2.0]), median(&[1.0, 2.0, 3.0]));
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    let mut calls = 0;
    let r = time_reconstruction(5, || {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 6);
    assert_eq!(r.runs_s.len(), 5);
    assert!(r.min_s <= r.median_s && r.median_s <= r.max_s);
}
