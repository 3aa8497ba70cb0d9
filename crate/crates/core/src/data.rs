//! Synthetic Gaussian-world datasets and the on-disk scene layout.
//!
//! ```text
//! <root>/<scene_id>/view_000.png ...   RGB views
//!                  /poses.json         array of CameraPose, one per view
//!                  /mask_000.png ...   optional coverage masks
//!                  /gt.sggs            optional ground-truth scene
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian3D, GaussianSet};
use crate::geometry::CameraPose;
use crate::image::{load_mask_png, save_mask_png, Image};
use crate::splatter::{render_params, RenderSettings};

pub const POSES_FILE: &str = "poses.json";
pub const GT_FILE: &str = "gt.sggs";

/// Distance of every synthetic camera from the origin.
pub const ORBIT_RADIUS: f64 = 3.0;
/// Horizontal field of view of synthetic cameras, in degrees.
pub const FOV_DEGREES: f64 = 40.0;
pub const ELEVATION_RANGE: (f64, f64) = (-30.0, 60.0);

pub fn view_file(i: usize) -> String {
    format!("view_{i:03}.png")
}

pub fn mask_file(i: usize) -> String {
    format!("mask_{i:03}.png")
}

/// Camera on the orbit sphere looking at the origin. Angles in degrees.
pub fn orbit_pose(azimuth: f64, elevation: f64, width: usize, height: usize) -> CameraPose {
    let (az, el) = (azimuth.to_radians(), elevation.to_radians());
    let eye = [
        ORBIT_RADIUS * el.cos() * az.sin(),
        ORBIT_RADIUS * el.sin(),
        ORBIT_RADIUS * el.cos() * az.cos(),
    ];
    let f = width as f64 / (2.0 * (FOV_DEGREES.to_radians() / 2.0).tan());
    CameraPose::look_at(
        eye,
        [0.0; 3],
        [0.0, 1.0, 0.0],
        f,
        f,
        width as f64 / 2.0,
        height as f64 / 2.0,
        ORBIT_RADIUS - 1.5,
        ORBIT_RADIUS + 1.5,
    )
    .expect("orbit elevations stay below the poles")
}

/// `n` cameras evenly spaced in azimuth at a fixed elevation.
pub fn ring_poses(n: usize, elevation: f64, width: usize, height: usize) -> Vec<CameraPose> {
    (0..n)
        .map(|i| orbit_pose(360.0 * i as f64 / n as f64, elevation, width, height))
        .collect()
}

/// Random pose with uniform azimuth and elevation in `ELEVATION_RANGE`.
pub fn random_pose(rng: &mut impl Rng, width: usize, height: usize) -> CameraPose {
    let az = rng.random_range(0.0..360.0);
    let el = rng.random_range(ELEVATION_RANGE.0..ELEVATION_RANGE.1);
    orbit_pose(az, el, width, height)
}

/// A compound shape of 2–5 colored blobs inside the unit cube.
pub fn random_scene(rng: &mut impl Rng, n_gaussians: usize) -> GaussianSet {
    let blobs = rng.random_range(2..=5usize).min(n_gaussians.max(1));
    let centers: Vec<[f32; 3]> = (0..blobs)
        .map(|_| std::array::from_fn(|_| rng.random_range(-0.45..0.45)))
        .collect();
    let colors: Vec<[f32; 3]> = (0..blobs)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.1..0.95)))
        .collect();
    let spread: Vec<f32> = (0..blobs).map(|_| rng.random_range(0.08..0.2)).collect();
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let gaussians = (0..n_gaussians)
        .map(|i| {
            let b = i % blobs;
            let mu = std::array::from_fn(|a| (centers[b][a] + spread[b] * normal.sample(rng)).clamp(-0.9, 0.9));
            let q: [f32; 4] = std::array::from_fn(|_| normal.sample(rng));
            let qn = q.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
            Gaussian3D {
                mu,
                scale: std::array::from_fn(|_| rng.random_range(0.03..0.09)),
                rot: q.map(|v| v / qn),
                color: std::array::from_fn(|a| (colors[b][a] + 0.05 * normal.sample(rng)).clamp(0.0, 1.0)),
                opacity: rng.random_range(0.7..1.0),
            }
        })
        .collect();
    GaussianSet::new(gaussians)
}

/// Render a stored set to an image plus coverage.
pub fn render_view(gs: &GaussianSet, pose: &CameraPose, width: usize, height: usize) -> (Image, Vec<f32>) {
    let params: Vec<f64> = gs.to_flat().into_iter().map(f64::from).collect();
    let out = render_params(&params, pose, height, width, &RenderSettings::default());
    let rgb = out.rgb.iter().map(|v| *v as f32).collect();
    (Image::new(width, height, rgb), out.alpha.iter().map(|v| *v as f32).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_scenes: usize,
    pub gaussians_per_scene: usize,
    pub n_views: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Write `n_scenes` scenes under `root`; returns the scene directories.
/// Scene `i` uses RNG stream `i`, so scenes are independent of each other.
pub fn make_synthetic_dataset(root: &Path, spec: &SyntheticSpec) -> Result<Vec<PathBuf>> {
    if spec.n_scenes == 0 || spec.gaussians_per_scene == 0 || spec.n_views == 0 || spec.resolution == 0 {
        return Err(Error::Config("dataset parameters must be positive".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let res = spec.resolution;
    let mut dirs = Vec::with_capacity(spec.n_scenes);
    for s in 0..spec.n_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(s as u64);
        let dir = root.join(format!("scene_{s:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let gs = random_scene(&mut rng, spec.gaussians_per_scene);
        let poses: Vec<CameraPose> = (0..spec.n_views).map(|_| random_pose(&mut rng, res, res)).collect();
        for (i, pose) in poses.iter().enumerate() {
            let (img, alpha) = render_view(&gs, pose, res, res);
            img.save_png(&dir.join(view_file(i)))?;
            let mask: Vec<f32> = alpha.iter().map(|a| if *a > 0.5 { 1.0 } else { 0.0 }).collect();
            save_mask_png(&dir.join(mask_file(i)), res, res, &mask)?;
        }
        let poses_path = dir.join(POSES_FILE);
        let json = serde_json::to_string_pretty(&poses).expect("poses serialize");
        fs::write(&poses_path, json).map_err(|e| Error::io(&poses_path, e))?;
        gs.save(&dir.join(GT_FILE))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// A validated scene directory; images are not loaded yet.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub views: Vec<(PathBuf, CameraPose)>,
    pub gt: Option<PathBuf>,
    pub masks: Option<Vec<PathBuf>>,
}

/// A scene with its images in memory.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub images: Vec<Image>,
    pub poses: Vec<CameraPose>,
    pub masks: Option<Vec<Vec<f32>>>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0))
    }
}

impl SceneRecord {
    /// Validate the layout of one scene directory.
    pub fn open(dir: &Path) -> Result<SceneRecord> {
        let scene_err = |message: String| Error::Scene {
            path: dir.to_path_buf(),
            message,
        };
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| scene_err("scene directory name is not UTF-8".into()))?
            .to_string();
        let poses_path = dir.join(POSES_FILE);
        let text = fs::read_to_string(&poses_path).map_err(|e| Error::io(&poses_path, e))?;
        let poses: Vec<CameraPose> = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: poses_path.clone(),
            source,
        })?;
        if poses.len() < 2 {
            return Err(scene_err(format!("{} views, need at least 2", poses.len())));
        }
        let mut views = Vec::with_capacity(poses.len());
        for (i, pose) in poses.into_iter().enumerate() {
            pose.validate().map_err(|e| scene_err(format!("pose {i}: {e}")))?;
            let path = dir.join(view_file(i));
            if !path.is_file() {
                return Err(scene_err(format!("missing {}", path.display())));
            }
            views.push((path, pose));
        }
        let mask_paths: Vec<PathBuf> = (0..views.len()).map(|i| dir.join(mask_file(i))).collect();
        let masks = mask_paths.iter().all(|p| p.is_file()).then_some(mask_paths);
        let gt = Some(dir.join(GT_FILE)).filter(|p| p.is_file());
        Ok(SceneRecord { id, views, gt, masks })
    }

    /// Read images and masks, checking that every view has the same size
    /// (and `expected` `(H, W)` when given).
    pub fn load(&self, expected: Option<(usize, usize)>) -> Result<Scene> {
        let mut images = Vec::with_capacity(self.views.len());
        for (path, _) in &self.views {
            let img = Image::load_png(path)?;
            let hw = (img.height, img.width);
            let want = expected.or(images.first().map(|i: &Image| (i.height, i.width)));
            if let Some(want) = want {
                if hw != want {
                    return Err(Error::Scene {
                        path: path.clone(),
                        message: format!("resolution {hw:?}, expected {want:?}"),
                    });
                }
            }
            images.push(img);
        }
        let masks = match &self.masks {
            Some(paths) => {
                let mut out = Vec::with_capacity(paths.len());
                for path in paths {
                    let (w, h, m) = load_mask_png(path)?;
                    if (h, w) != (images[0].height, images[0].width) {
                        return Err(Error::Scene {
                            path: path.clone(),
                            message: "mask resolution differs from its view".into(),
                        });
                    }
                    out.push(m);
                }
                Some(out)
            }
            None => None,
        };
        Ok(Scene {
            id: self.id.clone(),
            images,
            poses: self.views.iter().map(|(_, p)| p.clone()).collect(),
            masks,
        })
    }
}

/// Lazily validates scene directories in lexicographic order.
pub struct DatasetIter {
    dirs: std::vec::IntoIter<PathBuf>,
}

impl Iterator for DatasetIter {
    type Item = Result<SceneRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.dirs.next().map(|d| SceneRecord::open(&d))
    }
}

pub fn load_dataset(root: &Path) -> Result<DatasetIter> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(DatasetIter { dirs: dirs.into_iter() })
}

/// Load every valid scene, logging and skipping the rest.
pub fn load_scenes(root: &Path, expected: Option<(usize, usize)>) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for record in load_dataset(root)? {
        match record.and_then(|r| r.load(expected)) {
            Ok(scene) => scenes.push(scene),
            Err(e) => log::warn!("skipping scene: {e}"),
        }
    }
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(scenes)
}

/// Elevation span of a set of poses, used by tests to sanity-check camera
/// sampling. Returns degrees.
pub fn elevation_of(pose: &CameraPose) -> f64 {
    let c = pose.center();
    let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    (c[1] / r).asin() * 180.0 / PI
}
