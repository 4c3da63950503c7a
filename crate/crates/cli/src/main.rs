//! `planesweep` command-line tool.

mod dataset;

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use planesweep::fusion::{evaluate_acc_comp, fuse_point_cloud};
use planesweep::io::{metrics, pfm, ply};
use planesweep::pipeline::with_threads;
use planesweep::refine::run_refine_demo;
use planesweep::splat::{render_reference_image, render_source_image, smooth_reference_image};
use planesweep::{generate_synthetic_scene, run_cascade, ImageGrid, RunConfig, View};

use dataset::Dataset;

type CliResult<T> = Result<T, Box<dyn Error + Send + Sync>>;

#[derive(Parser)]
#[command(name = "planesweep", version, about = "Unsupervised multi-view depth engine on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene seed (same as `--set scene.seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set stage2.num_hypotheses=16`. Repeatable; applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: images, ground-truth depths, cameras, and the ground-truth cloud.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Run the three-stage cascade on a dataset (or a freshly generated scene).
    Run {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth`. Without it the scene comes from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Refine a perturbed ground-truth depth by gradient descent on the unsupervised loss.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fuse per-view depth maps into a point cloud.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Directory holding `depths/` and `cams/` (and optionally `images/` for colors).
        #[arg(long)]
        data: PathBuf,
        /// Depth subdirectory name inside `--data`.
        #[arg(long, default_value = "depths")]
        depths: String,
    },
    /// Accuracy and completeness of a reconstructed cloud against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Render views into each other from depths and images.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "depths")]
        depths: String,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Run { common, .. }
            | Command::Refine { common, .. }
            | Command::Fuse { common, .. }
            | Command::Eval { common, .. }
            | Command::Render { common, .. } => common,
        }
    }
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.scene.seed = seed;
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `data` or generates the configured scene.
fn dataset(cfg: &RunConfig, data: Option<&Path>) -> CliResult<Dataset> {
    match data {
        Some(dir) => Dataset::read(dir),
        None => Ok(Dataset::from_scene(&generate_synthetic_scene(&cfg.scene)?)),
    }
}

fn report(out_dir: &Path, name: &str, pairs: &[(String, f64)]) -> CliResult<()> {
    let path = out_dir.join(name);
    metrics::write(&path, pairs)?;
    print!("{}", metrics::render(pairs));
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let scene = generate_synthetic_scene(&cfg.scene)?;
    let ds = Dataset::from_scene(&scene);
    ds.write(out)?;
    let gt = scene.gt_point_cloud(cfg.eval.gt_supersample, cfg.eval.gt_min_views);
    ply::write(&out.join("gt.ply"), &gt)?;
    std::fs::write(out.join("config.txt"), cfg.render())?;
    println!("wrote {} views and {} ground-truth points to {}", ds.views.len(), gt.len(), out.display());
    Ok(())
}

fn run(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> CliResult<()> {
    let ds = dataset(cfg, data)?;
    let result = run_cascade(&ds.views, &cfg.cascade)?;
    let fin = result.final_stage();
    let mut depths = vec![fin.forward.ref_depth.clone()];
    depths.extend(fin.forward.synthetic_depths.iter().cloned());
    let images: Vec<ImageGrid> = fin.views.images.clone();
    Dataset::write_parts(out, Some(&images), &depths, &fin.views.cameras, "depths")?;
    let mut pairs = result.loss.key_values();
    for s in &result.stages {
        pfm::write_depth(&out.join(format!("stage{}_depth.pfm", s.stage)), &s.forward.ref_depth)?;
        if let Some(gt) = &ds.ground_truth {
            let gt = gt[0].downsample(s.config.divisor)?;
            if let Some(mae) = s.forward.ref_depth.masked_mae(&gt) {
                pairs.push((format!("stage{}.depth_mae", s.stage), mae));
            }
        }
    }
    std::fs::write(out.join("config.txt"), cfg.render())?;
    report(out, "metrics.txt", &pairs)
}

fn refine(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> CliResult<()> {
    let ds = dataset(cfg, data)?;
    let gt = ds
        .ground_truth
        .as_ref()
        .ok_or("refinement starts from perturbed ground truth; the dataset has no depths_gt/")?;
    let demo = run_refine_demo(&ds.views, &gt[0], &cfg.refine, cfg.cascade.weights, cfg.cascade.splat)?;
    std::fs::create_dir_all(out)?;
    pfm::write_depth(&out.join("initial_depth.pfm"), &demo.initial_depth)?;
    pfm::write_depth(&out.join("refined_depth.pfm"), &demo.output.depth)?;
    let trace: Vec<(String, f64)> = demo
        .output
        .trace
        .iter()
        .enumerate()
        .map(|(i, &v)| (format!("step{i:04}"), v))
        .collect();
    metrics::write(&out.join("trace.txt"), &trace)?;
    let trace = &demo.output.trace;
    let pairs = vec![
        ("loss_initial".to_string(), trace[0]),
        ("loss_final".to_string(), *trace.last().unwrap()),
        ("steps".to_string(), (trace.len() - 1) as f64),
        ("halted".to_string(), demo.output.halted as u8 as f64),
        ("mae_initial".to_string(), demo.mae_before),
        ("mae_final".to_string(), demo.mae_after),
    ];
    report(out, "metrics.txt", &pairs)
}

fn fuse(cfg: &RunConfig, data: &Path, depths: &str, out: &Path) -> CliResult<()> {
    let ds = Dataset::read_with_depths(data, depths)?;
    let colors = ds.views_at_depth_resolution()?;
    let images: Vec<ImageGrid> = colors.iter().map(|v| v.image.clone()).collect();
    let cams: Vec<_> = colors.iter().map(|v| v.camera.clone()).collect();
    let cloud = fuse_point_cloud(&ds.depths, &cams, &cfg.fusion, Some(&images))?;
    std::fs::create_dir_all(out)?;
    ply::write(&out.join("fused.ply"), &cloud)?;
    println!("fused {} points into {}", cloud.len(), out.join("fused.ply").display());
    Ok(())
}

fn eval(cfg: &RunConfig, recon: &Path, gt: &Path, out: &Path) -> CliResult<()> {
    let r = evaluate_acc_comp(&ply::read(recon)?, &ply::read(gt)?, cfg.eval.max_dist)?;
    std::fs::create_dir_all(out)?;
    let pairs = vec![
        ("accuracy".to_string(), r.accuracy),
        ("completeness".to_string(), r.completeness),
        ("overall".to_string(), r.overall),
    ];
    report(out, "eval.txt", &pairs)
}

fn masked(image: ImageGrid, mask: &[bool]) -> ImageGrid {
    let mut image = image;
    let c = image.channels;
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            image.data[p * c..(p + 1) * c].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    image
}

fn render(cfg: &RunConfig, data: &Path, depths: &str, out: &Path) -> CliResult<()> {
    let ds = Dataset::read_with_depths(data, depths)?;
    let views: Vec<View> = ds.views_at_depth_resolution()?;
    let dir = out.join("rendered");
    std::fs::create_dir_all(&dir)?;
    let (r_img, r_cam, r_depth) = (&views[0].image, &views[0].camera, &ds.depths[0]);
    let (mut to_ref, mut masks) = (Vec::new(), Vec::new());
    let mut pairs = Vec::new();
    for i in 1..views.len() {
        let (src, mask) = render_source_image(r_img, r_depth, r_cam, &views[i].camera, &cfg.cascade.splat)?;
        pairs.push((format!("source{i}.coverage"), coverage(&mask)));
        pfm::write_image(&dir.join(format!("source_{i:08}.pfm")), &masked(src, &mask))?;
        let (back, mask) = render_reference_image(&views[i].image, &ds.depths[i], &views[i].camera, r_cam, &cfg.cascade.splat)?;
        pairs.push((format!("reference_from{i}.coverage"), coverage(&mask)));
        pfm::write_image(&dir.join(format!("reference_from_{i:08}.pfm")), &masked(back.clone(), &mask))?;
        to_ref.push(back);
        masks.push(mask);
    }
    let smooth = smooth_reference_image(r_img, &to_ref, &masks)?;
    pfm::write_image(&dir.join("reference_smoothed.pfm"), &smooth)?;
    report(out, "render.txt", &pairs)
}

fn coverage(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> CliResult<()> {
    let out = cmd.common().out_dir.as_path();
    match cmd {
        Command::Synth { .. } => synth(cfg, out),
        Command::Run { data, .. } => run(cfg, data.as_deref(), out),
        Command::Refine { data, .. } => refine(cfg, data.as_deref(), out),
        Command::Fuse { data, depths, .. } => fuse(cfg, data, depths, out),
        Command::Eval { recon, gt, .. } => eval(cfg, recon, gt, out),
        Command::Render { data, depths, .. } => render(cfg, data, depths, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = load_config(cli.command.common()).and_then(|cfg| {
        with_threads(cli.command.common().threads, || dispatch(&cli.command, &cfg)).map_err(Into::into).and_then(|r| r)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
