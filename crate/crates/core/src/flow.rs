//! Rectified-flow noising and training-batch sampling.
//!
//! `x_t = (1 − t)·x_0 + t·ε`. The network is trained to recover `x_0`.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::image::Image;

/// Interpolate between `clean` and `eps`. Exact at both endpoints.
pub fn noise_views(clean: &[f32], t: f32, eps: &[f32]) -> Vec<f32> {
    assert_eq!(clean.len(), eps.len(), "clean and noise must match");
    if t == 0.0 {
        return clean.to_vec();
    }
    if t == 1.0 {
        return eps.to_vec();
    }
    clean.iter().zip(eps).map(|(x, e)| (1.0 - t) * x + t * e).collect()
}

pub fn noise_image(clean: &Image, t: f32, eps: &[f32]) -> Image {
    Image::new(clean.width, clean.height, noise_views(&clean.data, t, eps))
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// One multi-view training example.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    /// Network inputs, possibly noised.
    pub images: Vec<Image>,
    pub t: Vec<f32>,
    pub poses: Vec<CameraPose>,
    /// Views that survive input dropout.
    pub present: Vec<bool>,
    /// Clean images for every view, present or not.
    pub targets: Vec<Image>,
    pub masks: Option<Vec<Vec<f32>>>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of views fed to the network.
    pub fn present_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.present[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSampling {
    pub views: usize,
    pub noisy: usize,
    pub p_drop: f32,
}

/// Draw `views` distinct views, noise a random `noisy`-subset with one
/// shared `t ~ U[0, 1]` and drop each view with probability `p_drop`,
/// redrawing the mask until at least one view survives.
pub fn sample_training_batch(
    images: &[Image],
    poses: &[CameraPose],
    masks: Option<&[Vec<f32>]>,
    sampling: &FlowSampling,
    rng: &mut impl Rng,
) -> Result<ViewBatch> {
    let FlowSampling { views, noisy, p_drop } = *sampling;
    if images.len() < views || poses.len() < views {
        return Err(Error::TooFewViews {
            have: images.len().min(poses.len()),
            need: views,
        });
    }
    let picked = sample(rng, images.len(), views).into_vec();
    let noisy_slots = sample(rng, views, noisy.min(views)).into_vec();
    let t_shared: f32 = rng.random();
    let mut t = vec![0.0f32; views];
    for &i in &noisy_slots {
        t[i] = t_shared;
    }
    let mut batch_images = Vec::with_capacity(views);
    for (slot, &v) in picked.iter().enumerate() {
        let clean = &images[v];
        if t[slot] > 0.0 {
            let eps = standard_normal(rng, clean.data.len());
            batch_images.push(noise_image(clean, t[slot], &eps));
        } else {
            batch_images.push(clean.clone());
        }
    }
    let present = loop {
        let mask: Vec<bool> = (0..views).map(|_| rng.random::<f32>() >= p_drop).collect();
        if mask.iter().any(|&p| p) {
            break mask;
        }
    };
    Ok(ViewBatch {
        images: batch_images,
        t,
        poses: picked.iter().map(|&v| poses[v].clone()).collect(),
        present,
        targets: picked.iter().map(|&v| images[v].clone()).collect(),
        masks: masks.map(|m| picked.iter().map(|&v| m[v].clone()).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midpoint_value() {
        assert_eq!(noise_views(&[0.2], 0.5, &[0.8]), vec![0.5]);
    }

    #[test]
    fn endpoints_are_bit_exact() {
        let x = vec![-0.0f32, 0.3, 1.0];
        let e = vec![0.7f32, -1.2, f32::MIN_POSITIVE];
        let a = noise_views(&x, 0.0, &e);
        let b = noise_views(&x, 1.0, &e);
        for i in 0..3 {
            assert_eq!(a[i].to_bits(), x[i].to_bits());
            assert_eq!(b[i].to_bits(), e[i].to_bits());
        }
    }

    #[test]
    fn too_few_views_rejected() {
        let img = Image::filled(2, 2, 0.5);
        let pose = CameraPose::identity(1.0, 1.0, 1.0, 1.0);
        let s = FlowSampling {
            views: 5,
            noisy: 3,
            p_drop: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_training_batch(&vec![img; 4], &vec![pose; 4], None, &s, &mut rng);
        assert!(matches!(err, Err(Error::TooFewViews { have: 4, need: 5 })));
    }
}
