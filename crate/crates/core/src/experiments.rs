//! Evaluation over a dataset and the query-count scaling sweep.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::infer::{generate, GenerateRequest};
use crate::metrics::{input_view_bias, plot, BiasReport, Gap};
use crate::model::Model;
use crate::objective::PerceptualProxy;
use crate::trainer::{fit, Observer};

/// Split the last `holdout` views off every scene.
pub fn split_holdout(scenes: &[Scene], holdout: usize) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let mut train = Vec::with_capacity(scenes.len());
    let mut held = Vec::with_capacity(scenes.len());
    for s in scenes {
        if s.len() <= holdout {
            return Err(Error::TooFewViews {
                have: s.len(),
                need: holdout + 1,
            });
        }
        let k = s.len() - holdout;
        let part = |r: std::ops::Range<usize>| Scene {
            id: s.id.clone(),
            images: s.images[r.clone()].to_vec(),
            poses: s.poses[r.clone()].to_vec(),
            masks: s.masks.as_ref().map(|m| m[r.clone()].to_vec()),
        };
        train.push(part(0..k));
        held.push(part(k..s.len()));
    }
    Ok((train, held))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene: String,
    pub bias: BiasReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    /// Means over scenes of the per-scene gaps.
    pub psnr: Gap,
    pub ssim: Gap,
    pub perceptual: Gap,
}

fn mean_gap(gaps: &[&Gap]) -> Gap {
    let n = gaps.len().max(1) as f64;
    let finite_mean = |f: &dyn Fn(&Gap) -> f64| {
        let v: Vec<f64> = gaps.iter().map(|g| f(g)).filter(|v| v.is_finite()).collect();
        if v.is_empty() {
            f64::INFINITY
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let cond = finite_mean(&|g| g.cond);
    let novel = finite_mean(&|g| g.novel);
    Gap {
        cond,
        novel,
        delta: if cond == novel { 0.0 } else { cond - novel },
        excluded: (gaps.iter().map(|g| g.excluded).sum::<usize>() as f64 / n).round() as usize,
    }
}

/// Condition on the first `n_cond` views of `cond_scene`, use noise
/// placeholders at the poses of `novel_scene`, and compare renders at all
/// of those poses with the images.
pub fn evaluate_scene(
    model: &Model,
    cond_scene: &Scene,
    novel_scene: &Scene,
    n_cond: usize,
    proxy: &PerceptualProxy,
) -> Result<SceneEval> {
    let n_cond = n_cond.min(cond_scene.len());
    if n_cond == 0 {
        return Err(Error::EmptyPartition("conditioning"));
    }
    if novel_scene.is_empty() {
        return Err(Error::EmptyPartition("novel"));
    }
    let cond: Vec<_> = (0..n_cond)
        .map(|i| (cond_scene.images[i].clone(), cond_scene.poses[i].clone()))
        .collect();
    let n_ph = model.cfg.views.saturating_sub(n_cond).max(1);
    let ph: Vec<_> = (0..n_ph).map(|i| novel_scene.poses[i % novel_scene.len()].clone()).collect();
    let mut targets_pose = cond.iter().map(|(_, p)| p.clone()).collect::<Vec<_>>();
    targets_pose.extend(novel_scene.poses.iter().cloned());
    let req = GenerateRequest {
        conditioning: cond.clone(),
        placeholder_poses: Some(ph),
        target_poses: targets_pose,
        seed: model.cfg.seed,
    };
    let gen = generate(model, &req)?;
    let mut targets: Vec<_> = cond.into_iter().map(|(i, _)| i).collect();
    targets.extend(novel_scene.images.iter().cloned());
    let cond_idx: Vec<usize> = (0..n_cond).collect();
    Ok(SceneEval {
        scene: cond_scene.id.clone(),
        bias: input_view_bias(&gen.renders, &targets, &cond_idx, proxy)?,
    })
}

pub fn evaluate(model: &Model, cond: &[Scene], novel: &[Scene], n_cond: usize) -> Result<EvalReport> {
    if cond.len() != novel.len() || cond.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let proxy = PerceptualProxy::default();
    let scenes = cond
        .iter()
        .zip(novel)
        .map(|(c, n)| evaluate_scene(model, c, n, n_cond, &proxy))
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&SceneEval) -> &Gap| mean_gap(&scenes.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        psnr: pick(|s| &s.bias.psnr),
        ssim: pick(|s| &s.bias.ssim),
        perceptual: pick(|s| &s.bias.perceptual),
        scenes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub num_queries: usize,
    pub total_gaussians: usize,
    pub seed: u64,
    pub novel_psnr: f64,
    pub cond_psnr: f64,
    pub novel_ssim: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Adjacent pairs where novel-view PSNR dropped as M grew.
    pub inversions: Vec<(usize, usize, f64)>,
}

impl ScalingReport {
    /// Non-decreasing in M with at most one inversion of at most `tol` dB.
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.inversions.len() <= 1 && self.inversions.iter().all(|(_, _, d)| *d <= tol)
    }
}

struct LastLoss(f64);

impl Observer for LastLoss {
    fn on_step(&mut self, _state: &crate::trainer::TrainState, report: &crate::trainer::StepReport) {
        self.0 = report.loss.total;
    }
}

/// Train `cfg` once per query count on the same scenes and seed, then
/// evaluate novel-view quality on the held-out views.
pub fn run_scaling(
    cfg: &TrainConfig,
    train: &[Scene],
    held: &[Scene],
    queries: &[usize],
    run_dir: Option<&Path>,
) -> Result<ScalingReport> {
    let mut rows = Vec::with_capacity(queries.len());
    for &m in queries {
        let mut c = cfg.clone();
        c.num_queries = m;
        c.validate()?;
        let sub = run_dir.map(|d| d.join(format!("M{m}")));
        let mut last = LastLoss(f64::NAN);
        let state = fit(&c, train, sub.as_deref(), None, &mut last)?;
        let report = evaluate(&state.model, train, held, 1)?;
        log::info!("M={m}: novel psnr {:.3}", report.psnr.novel);
        rows.push(ScalingRow {
            num_queries: m,
            total_gaussians: c.total_gaussians(),
            seed: c.seed,
            novel_psnr: report.psnr.novel,
            cond_psnr: report.psnr.cond,
            novel_ssim: report.ssim.novel,
            final_loss: last.0,
        });
    }
    let inversions = rows
        .windows(2)
        .filter(|w| w[1].novel_psnr < w[0].novel_psnr)
        .map(|w| (w[0].num_queries, w[1].num_queries, w[0].novel_psnr - w[1].novel_psnr))
        .collect();
    let report = ScalingReport { rows, inversions };
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("scaling.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let ys: Vec<f64> = report.rows.iter().map(|r| r.novel_psnr).collect();
        plot::series(&ys, &dir.join("scaling.png"))?;
    }
    Ok(report)
}
