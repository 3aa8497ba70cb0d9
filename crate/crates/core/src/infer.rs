//! One-step generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ring_poses;
use crate::error::{Error, Result};
use crate::flow::standard_normal;
use crate::gaussians::GaussianSet;
use crate::geometry::CameraPose;
use crate::image::Image;
use crate::model::Model;
use crate::splatter::render;

/// Elevation of the default placeholder ring, in degrees.
pub const PLACEHOLDER_ELEVATION: f64 = 20.0;

#[derive(Clone, Debug)]
pub struct GenerateRequest {
    /// Clean views fed with `t = 0`.
    pub conditioning: Vec<(Image, CameraPose)>,
    /// One pose per noise placeholder (`t = 1`). `None` fills the remaining
    /// `V − #conditioning` slots from a fixed azimuth ring.
    pub placeholder_poses: Option<Vec<CameraPose>>,
    pub target_poses: Vec<CameraPose>,
    /// Seeds the placeholder noise.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub gaussians: GaussianSet,
    pub renders: Vec<Image>,
}

/// Poses for `n` placeholders, or an error when the caller supplied too few.
pub fn placeholder_poses(model: &Model, req: &GenerateRequest, n: usize) -> Result<Vec<CameraPose>> {
    match &req.placeholder_poses {
        Some(p) if p.len() < n => Err(Error::MissingPoses {
            placeholders: n,
            poses: p.len(),
        }),
        Some(p) => Ok(p[..n].to_vec()),
        None => Ok(ring_poses(
            n,
            PLACEHOLDER_ELEVATION,
            model.cfg.image_width,
            model.cfg.image_height,
        )),
    }
}

/// Run the network once on clean conditioning views plus noise
/// placeholders and render the decoded set at every target pose.
pub fn generate(model: &Model, req: &GenerateRequest) -> Result<Generation> {
    let cfg = &model.cfg;
    let (h, w) = (cfg.image_height, cfg.image_width);
    let n_placeholders = match &req.placeholder_poses {
        Some(p) => p.len(),
        None => cfg.views.saturating_sub(req.conditioning.len()),
    };
    let n_placeholders = if req.conditioning.is_empty() {
        n_placeholders.max(1)
    } else {
        n_placeholders
    };
    let ph_poses = placeholder_poses(model, req, n_placeholders)?;

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut images: Vec<Image> = Vec::new();
    let mut t = Vec::new();
    let mut poses = Vec::new();
    for (img, pose) in &req.conditioning {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape(format!(
                "conditioning view {}×{} vs model {h}×{w}",
                img.height, img.width
            )));
        }
        images.push(img.clone());
        t.push(0.0);
        poses.push(pose.clone());
    }
    for pose in ph_poses {
        images.push(Image::new(w, h, standard_normal(&mut rng, w * h * 3)));
        t.push(1.0);
        poses.push(pose);
    }
    let refs: Vec<&Image> = images.iter().collect();
    let gaussians = model.predict(&refs, &t, &poses)?;
    let renders = render_novel(&gaussians, &req.target_poses, h, w);
    Ok(Generation { gaussians, renders })
}

/// Render `gs` at each pose. No tape is built.
pub fn render_novel(gs: &GaussianSet, poses: &[CameraPose], height: usize, width: usize) -> Vec<Image> {
    poses
        .iter()
        .map(|p| {
            let r = render(gs, p, height, width);
            Image::new(width, height, r.rgb)
        })
        .collect()
}
