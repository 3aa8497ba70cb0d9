//! Training loop, optimizer state and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use autodiff::{clip_global_norm, Adam, Graph, ParamId, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::flow::{sample_training_batch, FlowSampling, ViewBatch};
use crate::image::Image;
use crate::infer::{generate, GenerateRequest};
use crate::metrics::psnr;
use crate::model::Model;
use crate::objective::{offset_reg_node, recon_loss_node, LossBreakdown, PerceptualProxy};
use crate::splatter::render_node;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.sgck";
pub const LOG_FILE: &str = "metrics.jsonl";

/// Parameters plus optimizer state. The data RNG for step `s` is stream `s`
/// of `cfg.seed`, so `(seed, step)` is the whole sampler state.
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let adam = Adam::new(&model.store, cfg.lr, cfg.beta1, cfg.beta2);
        Ok(TrainState { model, adam, step: 0 })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.model.cfg
    }
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Sampler RNG for `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub fn flow_sampling(cfg: &TrainConfig) -> FlowSampling {
    FlowSampling {
        views: cfg.views,
        noisy: cfg.noisy_views,
        p_drop: cfg.p_drop,
    }
}

/// Draw `batch_size` scenes (with replacement) and one example from each.
pub fn sample_batch(cfg: &TrainConfig, scenes: &[Scene], step: u64) -> Result<Vec<ViewBatch>> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = step_rng(cfg.seed, step);
    let sampling = flow_sampling(cfg);
    (0..cfg.batch_size)
        .map(|_| {
            let s = &scenes[rng.random_range(0..scenes.len())];
            sample_training_batch(&s.images, &s.poses, s.masks.as_deref(), &sampling, &mut rng)
        })
        .collect()
}

/// Build the loss of one example on the tape. Returns the total node and
/// the per-term values.
pub fn example_loss<'p>(
    g: &mut Graph<'p>,
    model: &'p Model,
    proxy: &PerceptualProxy,
    batch: &ViewBatch,
) -> Result<(Var, LossBreakdown)> {
    let cfg = &model.cfg;
    let idx = batch.present_indices();
    let images: Vec<&Image> = idx.iter().map(|&i| &batch.images[i]).collect();
    let t: Vec<f32> = idx.iter().map(|&i| batch.t[i]).collect();
    let poses: Vec<_> = idx.iter().map(|&i| batch.poses[i].clone()).collect();
    let multilayer = cfg.lambda_inter > 0.0 && cfg.decoder_layers >= 2;
    let fwd = model.forward(g, &images, &t, &poses, multilayer)?;
    let (h, w) = (cfg.image_height, cfg.image_width);
    let nv = batch.targets.len() as f32;

    let mut layer_losses = Vec::with_capacity(fwd.layers.len());
    let (mut l2_final, mut perc_final, mut occ_final) = (None, None, None);
    let last = fwd.layers.len() - 1;
    for (li, &params) in fwd.layers.iter().enumerate() {
        let mut l2_terms = Vec::new();
        let mut perc_terms = Vec::new();
        let mut occ_terms = Vec::new();
        for (v, target) in batch.targets.iter().enumerate() {
            if (target.height, target.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "target {}×{} vs configured {h}×{w}",
                    target.height, target.width
                )));
            }
            let out = render_node(g, params, &batch.poses[v], h, w);
            let rgb = g.slice_cols(out, 0, 3);
            let (l2, perc) = recon_loss_node(g, proxy, rgb, target);
            l2_terms.push(l2);
            perc_terms.push(perc);
            if li == last && cfg.use_opacity_loss {
                if let Some(masks) = &batch.masks {
                    let alpha = g.slice_cols(out, 3, 1);
                    occ_terms.push(g.mse_const(alpha, masks[v].clone()));
                }
            }
        }
        let l2 = mean_of(g, &l2_terms, nv);
        let perc = mean_of(g, &perc_terms, nv);
        let a = g.scale(l2, cfg.lambda_l2);
        let b = g.scale(perc, cfg.lambda_perc);
        layer_losses.push(g.add(a, b));
        if li == last {
            l2_final = Some(l2);
            perc_final = Some(perc);
            if !occ_terms.is_empty() {
                occ_final = Some(mean_of(g, &occ_terms, occ_terms.len() as f32));
            }
        }
    }
    let l2 = l2_final.expect("final layer");
    let perc = perc_final.expect("final layer");

    let final_params = fwd.last();
    let mu = g.slice_cols(final_params, 0, 3);
    let anchors = g.repeat_rows(fwd.refs, cfg.gaussians_per_query);
    let reg = offset_reg_node(g, mu, anchors, cfg.offset_threshold);

    let mut total = layer_losses[last];
    let reg_w = g.scale(reg, cfg.lambda_reg);
    total = g.add(total, reg_w);
    let mut inter_value = 0.0;
    if last > 0 {
        let inter = mean_of(g, &layer_losses[..last], last as f32);
        inter_value = f64::from(g.scalar(inter));
        let iw = g.scale(inter, cfg.lambda_inter);
        total = g.add(total, iw);
    }
    let mut occ_value = 0.0;
    if let Some(occ) = occ_final {
        occ_value = f64::from(g.scalar(occ));
        let ow = g.scale(occ, cfg.lambda_occ);
        total = g.add(total, ow);
    }
    let breakdown = LossBreakdown::new(
        cfg,
        f64::from(g.scalar(l2)),
        f64::from(g.scalar(perc)),
        occ_value,
        f64::from(g.scalar(reg)),
        inter_value,
    );
    Ok((total, breakdown))
}

fn mean_of<'p>(g: &mut Graph<'p>, terms: &[Var], n: f32) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / n)
}

/// One optimizer update over a batch of examples. On a non-finite loss or
/// gradient the parameters are left untouched.
pub fn training_step(state: &mut TrainState, proxy: &PerceptualProxy, batch: &[ViewBatch]) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grads: BTreeMap<ParamId, Vec<f32>> = BTreeMap::new();
    let mut loss = LossBreakdown::default();
    let scale = 1.0 / batch.len() as f32;
    for example in batch {
        let mut g = Graph::new();
        let (total, parts) = example_loss(&mut g, &state.model, proxy, example)?;
        if !parts.is_finite() || !g.scalar(total).is_finite() {
            log::error!("non-finite loss at step {}: {parts:?}", state.step);
            return Err(Error::NonFiniteLoss {
                step: state.step,
                detail: format!("{parts:?}"),
            });
        }
        loss.accumulate(&parts, batch.len());
        for (id, gv) in g.backward(total).into_params() {
            match grads.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b * scale),
                None => {
                    grads.insert(id, gv.into_iter().map(|v| v * scale).collect());
                }
            }
        }
    }
    let grad_norm = if state.cfg().grad_clip > 0.0 {
        clip_global_norm(&mut grads, state.cfg().grad_clip)
    } else {
        autodiff::global_norm(&grads)
    };
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: "non-finite gradient norm".into(),
        });
    }
    state.adam.step(&mut state.model.store, &grads);
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        loss,
        grad_norm: f64::from(grad_norm),
    })
}

/// Progress of a run, for callers that want per-step access.
pub trait Observer {
    fn on_step(&mut self, _state: &TrainState, _report: &StepReport) {}
}

impl Observer for () {}

/// Train until `cfg.n_iter` steps, starting from `state` (or fresh
/// parameters). Batches are prepared on a helper thread and handed over a
/// bounded queue. With a run directory, writes a JSONL log, periodic
/// validation renders and checkpoints.
pub fn fit(
    cfg: &TrainConfig,
    scenes: &[Scene],
    run_dir: Option<&Path>,
    state: Option<TrainState>,
    observer: &mut dyn Observer,
) -> Result<TrainState> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    let mut log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let proxy = PerceptualProxy::default();
    let start = state.step;
    let end = cfg.n_iter;
    let timer = Instant::now();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel(cfg.prefetch.max(1));
        scope.spawn(move || {
            for step in start..end {
                if tx.send(sample_batch(cfg, scenes, step)).is_err() {
                    break;
                }
            }
        });
        for batch in rx.iter() {
            let report = match training_step(&mut state, &proxy, &batch?) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = run_dir {
                        let path = dir.join(format!("failure_step{:06}.json", state.step));
                        let _ = fs::write(&path, format!("{{\"error\": {:?}}}\n", e.to_string()));
                        let _ = save_checkpoint(&state, &dir.join("failure.sgck"));
                    }
                    return Err(e);
                }
            };
            if let Some((path, w)) = log.as_mut() {
                let line = serde_json::json!({
                    "step": report.step,
                    "loss": report.loss,
                    "grad_norm": report.grad_norm,
                    "elapsed_s": timer.elapsed().as_secs_f64(),
                });
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if report.step % 100 == 0 || report.step == end {
                log::info!(
                    "step {} loss {:.5} l2 {:.5} grad {:.3}",
                    report.step,
                    report.loss.total,
                    report.loss.l2,
                    report.grad_norm
                );
            }
            if let Some(dir) = run_dir {
                if cfg.validate_every > 0 && report.step % cfg.validate_every == 0 {
                    let val = validate(&state, &scenes[0], Some(&dir.join("val")))?;
                    log::info!("step {} validation psnr {:.2}", report.step, val);
                }
                if cfg.checkpoint_every > 0 && report.step % cfg.checkpoint_every == 0 {
                    save_checkpoint(&state, &dir.join(CHECKPOINT_FILE))?;
                }
            }
            observer.on_step(&state, &report);
        }
        Ok(())
    })?;

    if let Some((path, w)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    if let Some(dir) = run_dir {
        save_checkpoint(&state, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(state)
}

/// Condition on the first view of `scene`, render all of its views and
/// return the mean PSNR over the views not used as input. Optionally
/// writes a side-by-side PNG per view.
pub fn validate(state: &TrainState, scene: &Scene, out_dir: Option<&Path>) -> Result<f64> {
    let cfg = state.cfg();
    let n = scene.len().min(cfg.views.max(2));
    let req = GenerateRequest {
        conditioning: vec![(scene.images[0].clone(), scene.poses[0].clone())],
        placeholder_poses: Some(scene.poses[1..n].to_vec()),
        target_poses: scene.poses.clone(),
        seed: cfg.seed,
    };
    let gen = generate(&state.model, &req)?;
    let mut total = 0.0;
    let mut count = 0;
    for (v, render) in gen.renders.iter().enumerate() {
        if v > 0 {
            let p = psnr(render, &scene.images[v])?;
            if p.is_finite() {
                total += p;
                count += 1;
            }
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let pair = side_by_side(render, &scene.images[v]);
            pair.save_png(&dir.join(format!("step{:06}_view{v:03}.png", state.step)))?;
        }
    }
    Ok(if count > 0 { total / count as f64 } else { f64::INFINITY })
}

pub fn side_by_side(a: &Image, b: &Image) -> Image {
    let (w, h) = (a.width + b.width, a.height.max(b.height));
    let mut data = vec![0.0; w * h * 3];
    for (img, x0) in [(a, 0), (b, a.width)] {
        for y in 0..img.height {
            let src = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
            let dst = (y * w + x0) * 3;
            data[dst..dst + src.len()].copy_from_slice(src);
        }
    }
    Image::new(w, h, data)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    step: u64,
    config: TrainConfig,
    adam_step: u64,
    params: Vec<(String, Vec<usize>)>,
}

/// Layout: magic, version (u32 LE), header length (u64 LE), JSON header,
/// then little-endian f32 parameters, first moments and second moments,
/// each in store order.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        step: state.step,
        config: state.cfg().clone(),
        adam_step: state.adam.step,
        params: state
            .model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.shape.clone()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let numel = state.model.store.numel();
    let mut bytes = Vec::with_capacity(16 + json.len() + numel * 12);
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, p) in state.model.store.iter() {
        p.data.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    }
    for moments in [&state.adam.m, &state.adam.v] {
        for m in moments.iter() {
            m.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut state = TrainState::new(&header.config)?;
    let layout: Vec<(String, Vec<usize>)> = state
        .model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.shape.clone()))
        .collect();
    if layout != header.params {
        return Err(bad("parameter layout does not match the configuration"));
    }
    let numel = state.model.store.numel();
    let mut floats = bytes[16 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    if (bytes.len() - 16 - hlen) != numel * 12 {
        return Err(bad("payload size mismatch"));
    }
    let ids: Vec<ParamId> = state.model.store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        for v in state.model.store.data_mut(id) {
            *v = floats.next().expect("sized");
        }
    }
    for i in 0..ids.len() {
        state.adam.m[i].iter_mut().for_each(|v| *v = floats.next().expect("sized"));
    }
    for i in 0..ids.len() {
        state.adam.v[i].iter_mut().for_each(|v| *v = floats.next().expect("sized"));
    }
    state.adam.step = header.adam_step;
    state.step = header.step;
    Ok(state)
}

/// Default checkpoint location inside a run directory.
pub fn checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join(CHECKPOINT_FILE)
}
