//! Command-line front end: `make-scene`, `train-nerf`, `train-generator`,
//! `render` and `evaluate`.
//!
//! Settings come from a TOML run config layered over built-in defaults,
//! then from flags. Every command echoes its effective config.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, NoiseSpec};
use crate::image::Image;
use crate::metrics::{self, DepthView};
use crate::perceptual::FeatureExtractor;
use crate::radiance_field::{render_image, Field};
use crate::rng;
use crate::scene_io::{
    camera_record, decode_cameras, decode_depth, encode_depth, load_dataset, make_synthetic_scene, orbit_arc,
    record_camera, render_view, save_dataset, CameraIntrinsics, CameraPose, CamerasFile, SceneBounds, SceneDataset,
    SceneSpec,
};
use crate::training::{self, RunDir, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Window and stride of the patch perceptual maps.
    pub patch: usize,
    pub stride: usize,
    /// Relative depth tolerance for reprojection visibility.
    pub depth_tolerance: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { patch: 32, stride: 16, depth_tolerance: 0.02 }
    }
}

/// Everything a run needs. `seed` overrides `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub dataset: PathBuf,
    pub scene: SceneSpec,
    /// Frames and arc (in turns of the test orbit) of the camera path
    /// written by `make-scene`.
    pub path_frames: usize,
    pub path_turns: f64,
    pub cache_renders: bool,
    pub train: TrainConfig,
    pub metrics: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output: PathBuf::from("runs/default"),
            dataset: PathBuf::from("data/scene"),
            scene: SceneSpec::default(),
            path_frames: 30,
            path_turns: 0.1,
            cache_renders: true,
            train: TrainConfig::default(),
            metrics: MetricOptions::default(),
        }
    }
}

/// Overlay `over` on `base`. A table naming a different enum variant
/// (`type` or `kind` key) replaces the base table instead of merging.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o))
            if ["type", "kind"].iter().all(|t| o.get(*t).is_none() || o.get(*t) == b.get(*t)) =>
        {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Desk-scale defaults (64x64 scenes, see [`TrainConfig::desk`]).
    pub fn desk() -> Self {
        RunConfig {
            scene: SceneSpec { width: 64, height: 64, focal: 60.0, ..SceneSpec::default() },
            train: TrainConfig::desk(),
            ..RunConfig::default()
        }
    }

    /// Parse `text` as overrides of `base`; unknown keys are errors.
    pub fn from_toml_over(base: &RunConfig, text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::format("run config", e.to_string()))?;
        let mut merged = toml::Value::try_from(base).map_err(|e| Error::invalid(e.to_string()))?;
        merge(&mut merged, over);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::format("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("run config does not serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.path_frames == 0 || !self.path_turns.is_finite() {
            return Err(Error::invalid("camera path needs frames and a finite arc"));
        }
        if self.metrics.patch == 0 || self.metrics.stride == 0 || !(self.metrics.depth_tolerance > 0.0) {
            return Err(Error::invalid("metric patch, stride and depth tolerance must be positive"));
        }
        Ok(())
    }
}

/// Ablation tags accepted by `--ablate`.
pub const ABLATIONS: [&str; 8] = [
    "no-adversarial",
    "no-perceptual",
    "rgb-only",
    "no-discriminator",
    "no-gen-adversarial",
    "no-gen-perceptual",
    "no-rgb-encoding",
    "no-generator",
];

/// Apply ablation tags to `cfg` and record them in `cfg.ablations`.
pub fn apply_ablations(cfg: &mut TrainConfig, tags: &[String]) -> Result<()> {
    for tag in tags {
        match tag.as_str() {
            "no-adversarial" => cfg.lambda_adv_nerf = 0.0,
            "no-perceptual" => cfg.lambda_perc_nerf = 0.0,
            "rgb-only" => {
                cfg.lambda_adv_nerf = 0.0;
                cfg.lambda_perc_nerf = 0.0;
            }
            "no-discriminator" => {
                cfg.lambda_adv_nerf = 0.0;
                cfg.lambda_adv_gen = 0.0;
            }
            "no-gen-adversarial" => cfg.lambda_adv_gen = 0.0,
            "no-gen-perceptual" => cfg.lambda_perc_gen = 0.0,
            "no-rgb-encoding" => cfg.generator.rgb_encoding = false,
            // consumed by `render`: skip refinement
            "no-generator" => {}
            other => {
                return Err(Error::invalid(format!("unknown ablation {other:?}; known: {}", ABLATIONS.join(", "))));
            }
        }
        if !cfg.ablations.contains(tag) {
            cfg.ablations.push(tag.clone());
        }
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "advfield", version, about = "Radiance fields with adversarial patch losses and image refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene to a dataset directory.
    MakeScene(MakeSceneArgs),
    /// Stage 1: optimize the radiance field.
    TrainNerf(TrainNerfArgs),
    /// Stage 2: train the refinement generator on a frozen field.
    TrainGenerator(TrainGeneratorArgs),
    /// Render test views or a camera path, optionally refined.
    Render(RenderArgs),
    /// Score rendered images against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from desk-scale defaults instead of full-scale ones.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let base = if self.desk { RunConfig::desk() } else { RunConfig::default() };
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml_over(&base, &fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => base,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct MakeSceneArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory (default: `dataset` from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainNerfArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory (default: `output` from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ablation tag; repeatable.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Continue from a stage-1 checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainGeneratorArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Frozen field checkpoint (default: `<out>/checkpoints/field_final.bin`).
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
    /// Number of generator pyramid levels.
    #[arg(long)]
    pub gen_levels: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Render field patches on demand instead of caching whole images.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Also write generator-refined images.
    #[arg(long)]
    pub refine: bool,
    /// Camera path in `cameras.json` format instead of the test split.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Disable generator noise (bit-identical repeated renders).
    #[arg(long)]
    pub zero_noise: bool,
    /// Seed of the per-frame generator noise (default: the run seed).
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Zero the generator's conditioning encoders (unconditioned control).
    #[arg(long)]
    pub unconditioned: bool,
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Prediction directory, optionally `label=dir`; repeat to compare.
    #[arg(long = "predictions", required = true)]
    pub predictions: Vec<String>,
    /// Camera path (`cameras.json` format) whose frames are scored for
    /// view consistency instead of the test split.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_dir(path: &Path, what: &str, hint: &str) -> Result<()> {
    if !path.join("cameras.json").exists() {
        return Err(Error::Missing(format!("{what} at {} ({hint})", path.display())));
    }
    Ok(())
}

/// Name, intrinsics and pose of each camera in a `cameras.json`-format path file.
pub type PathCamera = (String, CameraIntrinsics, CameraPose, SceneBounds);

pub fn read_pose_path(path: &Path) -> Result<Vec<PathCamera>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_cameras(&text)?
        .cameras
        .iter()
        .map(|c| {
            let (k, pose, bounds) = record_camera(c)?;
            Ok((c.name.clone(), k, pose, bounds))
        })
        .collect()
}

/// `make-scene`: dataset plus `path.json` with ground-truth path frames.
pub fn cmd_make_scene(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = make_synthetic_scene(&cfg.scene, &mut rng::stream(cfg.seed, "scene", 0))?;
    save_dataset(&ds, out)?;
    let k = cfg.scene.intrinsics()?;
    let mut cameras = Vec::new();
    for (i, pose) in orbit_arc(&cfg.scene.test_orbit, cfg.path_frames, cfg.path_turns)?.iter().enumerate() {
        let name = format!("path_{i:03}");
        let (im, depth) = render_view(&cfg.scene, &k, pose);
        im.save_png16(&out.join("images").join(format!("{name}.png")))?;
        let p = out.join("depth").join(format!("{name}.f32"));
        fs::write(&p, encode_depth(&depth)).map_err(|e| Error::io(&p, e))?;
        cameras.push(camera_record(&name, &k, pose, ds.bounds));
    }
    let text = serde_json::to_string_pretty(&CamerasFile { cameras }).expect("serializable") + "\n";
    write_text(&out.join("path.json"), &text)?;
    write_text(&out.join("run_config.toml"), &cfg.to_toml()?)
}

pub fn cmd_train_nerf(cfg: &RunConfig, dataset: &Path, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    require_dir(dataset, "dataset", "run make-scene first")?;
    let ds = load_dataset(dataset)?;
    let run = RunDir::create(out, &cfg.train)?;
    write_text(&out.join("run_config.toml"), &cfg.to_toml()?)?;
    training::train_nerf(&ds, &cfg.train, &run, resume)?;
    Ok(run.checkpoint("field_final"))
}

pub fn cmd_train_generator(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    field: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    require_dir(dataset, "dataset", "run make-scene first")?;
    if !field.exists() {
        return Err(Error::Missing(format!(
            "field checkpoint {} (train the field with train-nerf first, or pass --field)",
            field.display()
        )));
    }
    let ds = load_dataset(dataset)?;
    let field = training::load_field(field)?;
    let run = RunDir::create_with(out, &cfg.train, "generator_config.toml")?;
    write_text(&out.join("generator_run_config.toml"), &cfg.to_toml()?)?;
    training::train_generator(&ds, &field, &cfg.train, &run, resume, cfg.cache_renders)?;
    Ok(run.checkpoint("generator_final"))
}

/// What `render` writes.
#[derive(Clone, Debug)]
pub struct RenderRequest<'a> {
    pub field: &'a Field,
    pub samples_per_ray: usize,
    pub generator: Option<&'a Generator>,
    /// `None`: zero noise; otherwise per-frame noise from this seed.
    pub noise_seed: Option<u64>,
}

/// Render frames, returning `(field, refined)` images in frame order.
pub fn render_frames(req: &RenderRequest, cameras: &[PathCamera]) -> Result<Vec<(Image, Option<Image>)>> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, (_, k, pose, bounds))| {
            let render = crate::radiance_field::RenderConfig::new(bounds.near, bounds.far, req.samples_per_ray)?;
            let (im, _) = render_image(req.field, k, pose, &render, 0, 4096)?;
            let refined = match req.generator {
                Some(g) => {
                    let noise = match req.noise_seed {
                        Some(s) => NoiseSpec::Sampled(rng::child_seed(s, "render-frame", i as u64)),
                        None => NoiseSpec::Zero,
                    };
                    Some(g.refine_padded(&im, &noise)?)
                }
                None => None,
            };
            Ok((im, refined))
        })
        .collect()
}

fn dataset_cameras(ds: &SceneDataset) -> Vec<PathCamera> {
    ds.test_images
        .iter()
        .enumerate()
        .map(|(i, im)| (format!("test_{i:03}"), im.intrinsics, im.pose, ds.bounds))
        .collect()
}

pub fn cmd_render(cfg: &RunConfig, args: &RenderArgs) -> Result<()> {
    let dataset = args.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    if !args.field.exists() {
        return Err(Error::Missing(format!("field checkpoint {}", args.field.display())));
    }
    let ckpt = crate::checkpoint::Checkpoint::load(&args.field)?;
    let field = training::field_from_checkpoint(&ckpt)?;
    let stored = TrainConfig::from_toml(&ckpt.config)?;
    let cameras = match &args.poses {
        Some(p) => read_pose_path(p)?,
        None => {
            require_dir(&dataset, "dataset", "pass --dataset or --poses")?;
            dataset_cameras(&load_dataset(&dataset)?)
        }
    };
    let refine = args.refine && !args.ablate.iter().any(|a| a == "no-generator");
    let generator = if refine {
        let path = args.generator.as_ref().ok_or_else(|| Error::Missing("--generator checkpoint for --refine".into()))?;
        if !path.exists() {
            return Err(Error::Missing(format!("generator checkpoint {}", path.display())));
        }
        let mut g = training::load_generator(path)?;
        if args.unconditioned {
            g.zero_conditioning();
        }
        Some(g)
    } else {
        None
    };
    let req = RenderRequest {
        field: &field,
        samples_per_ray: stored.samples_per_ray,
        generator: generator.as_ref(),
        noise_seed: if args.zero_noise { None } else { Some(args.noise_seed.unwrap_or(cfg.seed)) },
    };
    let frames = render_frames(&req, &cameras)?;
    for sub in ["field", "refined"] {
        if sub == "field" || refine {
            fs::create_dir_all(args.out.join(sub)).map_err(|e| Error::io(args.out.join(sub), e))?;
        }
    }
    for ((name, ..), (im, refined)) in cameras.iter().zip(&frames) {
        im.save_png16(&args.out.join("field").join(format!("{name}.png")))?;
        if let Some(r) = refined {
            r.save_png16(&args.out.join("refined").join(format!("{name}.png")))?;
        }
    }
    Ok(())
}

/// Ground truth and depth of the frames to score: the test split, or a
/// camera path written by `make-scene`.
pub struct EvalTargets {
    pub names: Vec<String>,
    pub truths: Vec<Image>,
    pub cameras: Vec<PathCamera>,
    pub depths: Vec<crate::scene_io::DepthMap>,
}

pub fn eval_targets(dataset: &Path, poses: Option<&Path>) -> Result<EvalTargets> {
    require_dir(dataset, "dataset", "pass --dataset")?;
    match poses {
        None => {
            let ds = load_dataset(dataset)?;
            let cameras = dataset_cameras(&ds);
            let depths = ds
                .test_images
                .iter()
                .map(|im| im.depth.clone().ok_or_else(|| Error::Missing("ground-truth depth of test views".into())))
                .collect::<Result<_>>()?;
            Ok(EvalTargets {
                names: cameras.iter().map(|c| c.0.clone()).collect(),
                truths: ds.test_images.iter().map(|im| im.pixels.clone()).collect(),
                cameras,
                depths,
            })
        }
        Some(p) => {
            let cameras = read_pose_path(p)?;
            let mut truths = Vec::new();
            let mut depths = Vec::new();
            for (name, k, ..) in &cameras {
                truths.push(Image::load_png(&dataset.join("images").join(format!("{name}.png")))?);
                let dp = dataset.join("depth").join(format!("{name}.f32"));
                let bytes = fs::read(&dp).map_err(|e| Error::io(&dp, e))?;
                depths.push(decode_depth(&bytes, k.width, k.height)?);
            }
            Ok(EvalTargets { names: cameras.iter().map(|c| c.0.clone()).collect(), truths, cameras, depths })
        }
    }
}

/// One row of a method comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
    pub kid: f64,
    pub consistency_mse: f64,
}

/// Score one prediction directory; writes `metrics.json`,
/// `consistency.json`, perceptual-map overlays and a column strip to `out`.
pub fn evaluate_dir(
    cfg: &RunConfig,
    extractor: &FeatureExtractor,
    targets: &EvalTargets,
    predictions: &Path,
    out: &Path,
    metadata: BTreeMap<String, String>,
) -> Result<ComparisonRow> {
    let mut preds = Vec::with_capacity(targets.names.len());
    for (name, gt) in targets.names.iter().zip(&targets.truths) {
        let p = predictions.join(format!("{name}.png"));
        if !p.exists() {
            return Err(Error::Missing(format!("prediction {} for ground truth {name}", p.display())));
        }
        let im = Image::load_png(&p)?;
        if !im.same_shape(gt) {
            return Err(Error::shape(format!("prediction {name} is {}x{}", im.width(), im.height())));
        }
        preds.push(im);
    }
    let pairs: Vec<(String, Image, Image)> = targets
        .names
        .iter()
        .zip(&preds)
        .zip(&targets.truths)
        .map(|((n, p), t)| (n.clone(), p.clone(), t.clone()))
        .collect();
    let report = metrics::evaluate_images(extractor, &pairs, metadata)?;
    write_text(&out.join("metrics.json"), &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"))?;

    let views: Vec<DepthView> = targets
        .cameras
        .iter()
        .zip(&targets.depths)
        .map(|((_, k, pose, _), depth)| DepthView { intrinsics: k, pose, depth })
        .collect();
    let consistency = metrics::view_consistency_mse(&preds, &views, cfg.metrics.depth_tolerance)?;
    write_text(&out.join("consistency.json"), &(serde_json::to_string_pretty(&consistency).expect("serializable") + "\n"))?;
    let column = preds[0].width() / 2;
    metrics::pixel_column_strip(&preds, column)?.save_png8(&out.join("column_strip.png"))?;

    let maps = out.join("perceptual_maps");
    fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    for (name, p, t) in &pairs {
        let size = cfg.metrics.patch.min(p.width()).min(p.height());
        let size = size - size % 16;
        if size >= 32 {
            let map = metrics::patch_perceptual_map(extractor, p, t, size, cfg.metrics.stride)?;
            map.overlay(p).save_png8(&maps.join(format!("{name}.png")))?;
        }
    }
    Ok(ComparisonRow {
        label: String::new(),
        mean_psnr: report.mean_psnr,
        mean_ssim: report.mean_ssim,
        mean_perceptual: report.mean_perceptual,
        kid: report.kid,
        consistency_mse: consistency.mean_mse,
    })
}

fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("| method | PSNR | SSIM | perceptual | KID | consistency MSE |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let psnr = r.mean_psnr.map_or("inf".to_string(), |v| format!("{v:.3}"));
        s += &format!(
            "| {} | {psnr} | {:.4} | {:.4} | {:.5} | {:.6} |\n",
            r.label, r.mean_ssim, r.mean_perceptual, r.kid, r.consistency_mse
        );
    }
    s
}

pub fn cmd_evaluate(cfg: &RunConfig, dataset: &Path, predictions: &[String], poses: Option<&Path>, out: &Path) -> Result<()> {
    let targets = eval_targets(dataset, poses)?;
    let extractor = FeatureExtractor::new(&cfg.train.perceptual)?;
    let sets: Vec<(String, PathBuf)> = predictions
        .iter()
        .map(|p| match p.split_once('=') {
            Some((label, dir)) => (label.to_string(), PathBuf::from(dir)),
            None => (p.clone(), PathBuf::from(p)),
        })
        .collect();
    let mut rows = Vec::new();
    for (label, dir) in &sets {
        let dest = if sets.len() == 1 { out.to_path_buf() } else { out.join(label) };
        let mut meta = BTreeMap::new();
        meta.insert("predictions".to_string(), label.clone());
        meta.insert("frames".to_string(), if poses.is_some() { "camera path" } else { "test split" }.to_string());
        let mut row = evaluate_dir(cfg, &extractor, &targets, dir, &dest, meta)?;
        row.label = label.clone();
        rows.push(row);
    }
    if sets.len() > 1 {
        write_text(&out.join("comparison.json"), &(serde_json::to_string_pretty(&rows).expect("serializable") + "\n"))?;
        write_text(&out.join("comparison.md"), &comparison_table(&rows))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeScene(a) => {
            let cfg = a.common.load()?;
            let out = a.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            cmd_make_scene(&cfg, &out)?;
            println!("{}", out.display());
        }
        Command::TrainNerf(a) => {
            let mut cfg = a.common.load()?;
            apply_ablations(&mut cfg.train, &a.ablate)?;
            if let Some(n) = a.iterations {
                cfg.train.nerf_iterations = n;
            }
            cfg.validate()?;
            let dataset = a.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
            let out = a.out.clone().unwrap_or_else(|| cfg.output.clone());
            println!("{}", cmd_train_nerf(&cfg, &dataset, &out, a.resume.as_deref())?.display());
        }
        Command::TrainGenerator(a) => {
            let mut cfg = a.common.load()?;
            apply_ablations(&mut cfg.train, &a.ablate)?;
            if let Some(l) = a.gen_levels {
                cfg.train.generator.levels = l;
                cfg.train.ablations.push(format!("gen-levels-{l}"));
            }
            if let Some(e) = a.epochs {
                cfg.train.generator_epochs = e;
            }
            if a.no_cache {
                cfg.cache_renders = false;
            }
            cfg.validate()?;
            let dataset = a.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
            let out = a.out.clone().unwrap_or_else(|| cfg.output.clone());
            let field = a.field.clone().unwrap_or_else(|| out.join("checkpoints").join("field_final.bin"));
            println!("{}", cmd_train_generator(&cfg, &dataset, &out, &field, a.resume.as_deref())?.display());
        }
        Command::Render(a) => {
            let cfg = a.common.load()?;
            cmd_render(&cfg, &a)?;
            println!("{}", a.out.display());
        }
        Command::Evaluate(a) => {
            let cfg = a.common.load()?;
            let dataset = a.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
            cmd_evaluate(&cfg, &dataset, &a.predictions, a.poses.as_deref(), &a.out)?;
            println!("{}", a.out.join("metrics.json").display());
        }
    }
    Ok(())
}

/// Parse arguments and run; returns the process exit code. Failures print
/// one line `error[<class>]: <message>` to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                eprintln!("error[usage]: {first}");
                return 2;
            }
            let _ = e.print();
            return 0;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            1
        }
    }
}
