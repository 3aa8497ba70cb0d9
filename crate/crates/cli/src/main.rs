use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use sparsegen::config::TrainConfig;
use sparsegen::data::{load_scenes, make_synthetic_dataset, SyntheticSpec};
use sparsegen::experiments::{evaluate, run_scaling, split_holdout};
use sparsegen::gaussians::GaussianSet;
use sparsegen::geometry::CameraPose;
use sparsegen::image::Image;
use sparsegen::infer::{generate, render_novel, GenerateRequest};
use sparsegen::metrics::{input_view_bias, plot, utilization, DEFAULT_TAU};
use sparsegen::objective::PerceptualProxy;
use sparsegen::trainer::{checkpoint_path, fit, load_checkpoint};

#[derive(Parser)]
#[command(name = "sparsegen", version, about = "Sparse anchor-query 3D Gaussian generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run directory; every artifact is written below it.
    #[arg(long, env = "SPARSEGEN_RUN_DIR", default_value = "runs/default")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config; keys follow the hyperparameter table (M, K, d, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides M.
    #[arg(long)]
    queries: Option<usize>,
    /// Square image resolution (overrides H and W).
    #[arg(long)]
    resolution: Option<usize>,
    /// Views per training example (overrides V).
    #[arg(long)]
    views: Option<usize>,
    /// Base preset when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Extra `key=value` overrides, value parsed as JSON.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-world dataset.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 256)]
        gaussians: usize,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Views per scene kept out of training.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
    },
    /// Generate a scene from conditioning views of a dataset scene.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory providing conditioning images and target poses.
        #[arg(long)]
        scene: PathBuf,
        /// Clean conditioning views (0 for unconditional).
        #[arg(long, default_value_t = 1)]
        views: usize,
    },
    /// Render a stored scene at the poses in a JSON file.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gaussians: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Input-view bias and utilization reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of rendered `view_%03d.png`.
        #[arg(long, requires = "targets")]
        renders: Option<PathBuf>,
        /// Directory of target `view_%03d.png`.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Conditioning view indices, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        cond: Vec<usize>,
        #[arg(long, requires = "dataset")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        holdout: usize,
        /// Scene file for the utilization report.
        #[arg(long)]
        gaussians: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Gaussians per query in the stored scene; enables per-query statistics.
        #[arg(long)]
        k: Option<usize>,
        /// Pose file; query centers are projected through its first pose.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Train at several query counts and tabulate novel-view quality.
    Scaling {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "m", value_delimiter = ',', default_value = "64,128,256")]
        m_values: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        holdout: usize,
    },
}

fn build_config(args: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let base = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => match args.preset {
            Preset::Default => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
            Preset::Tiny => TrainConfig::tiny(),
        },
    };
    let mut pairs: Vec<(String, Value)> = Vec::new();
    for kv in &args.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("expected KEY=VALUE, got {kv:?}"))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        pairs.push((k.to_string(), value));
    }
    if let Some(m) = args.queries {
        pairs.push(("M".into(), m.into()));
    }
    if let Some(r) = args.resolution {
        pairs.push(("H".into(), r.into()));
        pairs.push(("W".into(), r.into()));
    }
    if let Some(v) = args.views {
        pairs.push(("V".into(), v.into()));
    }
    if let Some(s) = seed {
        pairs.push(("seed".into(), s.into()));
    }
    Ok(base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_poses(path: &Path) -> Result<Vec<CameraPose>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let poses: Vec<CameraPose> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    for p in &poses {
        p.validate()?;
    }
    Ok(poses)
}

fn save_views(dir: &Path, images: &[Image]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, img) in images.iter().enumerate() {
        img.save_png(&dir.join(sparsegen::data::view_file(i)))?;
    }
    Ok(())
}

fn load_views(dir: &Path) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    loop {
        let p = dir.join(sparsegen::data::view_file(out.len()));
        if !p.is_file() {
            break;
        }
        out.push(Image::load_png(&p)?);
    }
    if out.is_empty() {
        bail!("no view_000.png in {}", dir.display());
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData {
            common,
            scenes,
            gaussians,
            views,
            resolution,
        } => {
            let spec = SyntheticSpec {
                n_scenes: scenes,
                gaussians_per_scene: gaussians,
                n_views: views,
                resolution,
                seed: common.seed.unwrap_or(0),
            };
            let dirs = make_synthetic_dataset(&common.out, &spec)?;
            println!("wrote {} scenes to {}", dirs.len(), common.out.display());
        }
        Command::Train {
            common,
            config,
            dataset,
            checkpoint,
            holdout,
        } => {
            let state = match &checkpoint {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            let cfg = match &state {
                Some(s) if config.config.is_none() && config.set.is_empty() => s.cfg().clone(),
                _ => build_config(&config, common.seed)?,
            };
            let scenes = load_scenes(&dataset, Some((cfg.image_height, cfg.image_width)))?;
            let (train, _) = if holdout > 0 {
                split_holdout(&scenes, holdout)?
            } else {
                (scenes, Vec::new())
            };
            fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("config.json"), &cfg)?;
            let state = fit(&cfg, &train, Some(&common.out), state, &mut ())?;
            println!(
                "trained to step {}; checkpoint {}",
                state.step,
                checkpoint_path(&common.out).display()
            );
        }
        Command::Generate {
            common,
            checkpoint,
            scene,
            views,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let cfg = state.cfg();
            let record = sparsegen::data::SceneRecord::open(&scene)?;
            let sc = record.load(Some((cfg.image_height, cfg.image_width)))?;
            if views > sc.len() {
                bail!("scene has {} views, {views} requested", sc.len());
            }
            let cond: Vec<_> = (0..views).map(|i| (sc.images[i].clone(), sc.poses[i].clone())).collect();
            let n_ph = cfg.views.saturating_sub(views).max(usize::from(views == 0));
            let ph: Vec<CameraPose> = (0..n_ph).map(|i| sc.poses[(views + i) % sc.len()].clone()).collect();
            let req = GenerateRequest {
                conditioning: cond,
                placeholder_poses: Some(ph),
                target_poses: sc.poses.clone(),
                seed: common.seed.unwrap_or(cfg.seed),
            };
            let gen = generate(&state.model, &req)?;
            fs::create_dir_all(&common.out)?;
            gen.gaussians.save(&common.out.join("scene.sggs"))?;
            write_json(&common.out.join("poses.json"), &sc.poses)?;
            save_views(&common.out.join("renders"), &gen.renders)?;
            println!(
                "{} Gaussians, {} renders in {}",
                gen.gaussians.len(),
                gen.renders.len(),
                common.out.display()
            );
        }
        Command::Render {
            common,
            gaussians,
            poses,
            resolution,
        } => {
            let gs = GaussianSet::load(&gaussians)?;
            let poses = read_poses(&poses)?;
            let Some(first) = poses.first() else {
                bail!("no poses");
            };
            let (w, h) = match resolution {
                Some(r) => (r, r),
                None => ((2.0 * first.cx).round() as usize, (2.0 * first.cy).round() as usize),
            };
            let images = render_novel(&gs, &poses, h, w);
            save_views(&common.out.join("renders"), &images)?;
            println!("rendered {} views to {}", images.len(), common.out.display());
        }
        Command::Eval {
            common,
            renders,
            targets,
            cond,
            checkpoint,
            dataset,
            holdout,
            gaussians,
            tau,
            k,
            poses,
        } => {
            fs::create_dir_all(&common.out)?;
            let mut did = false;
            if let (Some(r), Some(t)) = (&renders, &targets) {
                let (r, t) = (load_views(r)?, load_views(t)?);
                let report = input_view_bias(&r, &t, &cond, &PerceptualProxy::default())?;
                write_json(&common.out.join("bias.json"), &report)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
                did = true;
            }
            if let (Some(ck), Some(ds)) = (&checkpoint, &dataset) {
                let state = load_checkpoint(ck)?;
                let cfg = state.cfg();
                let scenes = load_scenes(ds, Some((cfg.image_height, cfg.image_width)))?;
                let (train, held) = split_holdout(&scenes, holdout)?;
                let report = evaluate(&state.model, &train, &held, 1)?;
                write_json(&common.out.join("eval.json"), &report)?;
                println!(
                    "psnr cond {:.3} novel {:.3} delta {:.3}",
                    report.psnr.cond, report.psnr.novel, report.psnr.delta
                );
                did = true;
            }
            if let Some(g) = &gaussians {
                let mut gs = GaussianSet::load(g)?;
                if let Some(k) = k {
                    if k == 0 || gs.len() % k != 0 {
                        bail!("{} Gaussians do not split into groups of {k}", gs.len());
                    }
                    gs.provenance = Some((0..gs.len()).map(|i| (i / k) as u32).collect());
                }
                let pose = match &poses {
                    Some(p) => read_poses(p)?.into_iter().next(),
                    None => None,
                };
                let report = utilization(&gs, tau, pose.as_ref());
                write_json(&common.out.join("utilization.json"), &report)?;
                plot::histogram(&report, &common.out.join("opacity_histogram.png"))?;
                if let (Some(points), Some(p)) = (&report.query_projections, &pose) {
                    let (w, h) = ((2.0 * p.cx).round() as usize, (2.0 * p.cy).round() as usize);
                    plot::projections(points, w, h, &common.out.join("query_projections.png"))?;
                }
                println!("low-opacity fraction {:.4}", report.low_opacity_fraction);
                did = true;
            }
            if !did {
                bail!("nothing to evaluate: pass --renders/--targets, --checkpoint/--dataset or --gaussians");
            }
        }
        Command::Scaling {
            common,
            config,
            dataset,
            m_values,
            holdout,
        } => {
            let cfg = build_config(&config, common.seed)?;
            let scenes = load_scenes(&dataset, Some((cfg.image_height, cfg.image_width)))?;
            let (train, held) = split_holdout(&scenes, holdout)?;
            let report = run_scaling(&cfg, &train, &held, &m_values, Some(&common.out))?;
            println!("{:>6} {:>8} {:>10} {:>10}", "M", "N", "novel_dB", "cond_dB");
            for r in &report.rows {
                println!(
                    "{:>6} {:>8} {:>10.3} {:>10.3}",
                    r.num_queries, r.total_gaussians, r.novel_psnr, r.cond_psnr
                );
            }
            if !report.is_monotone(0.2) {
                log::warn!("quality is not monotone in M: {:?}", report.inversions);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
