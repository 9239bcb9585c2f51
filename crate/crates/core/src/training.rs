//! Two-stage optimization.
//!
//! Stage 1 trains the radiance field on per-ray color error plus patch
//! perceptual and adversarial terms, alternating with a patch
//! discriminator. Stage 2 freezes the field and trains the image generator
//! on its renders, alternating with a second discriminator.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, step)`,
//! so a run resumed from a checkpoint continues exactly like an
//! uninterrupted one.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversarial::{discriminator_gradients, minimizer_loss_var, Critic, Discriminator, DiscriminatorConfig};
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, NoiseSpec};
use crate::image::Image;
use crate::nn::{Optimizer, OptimizerConfig, ParamSet};
use crate::perceptual::{perceptual_loss_to, FeatureExtractor, PerceptualConfig};
use crate::radiance_field::{render_image, render_rays, render_rays_backward, Field, FieldConfig, FieldModel, RenderConfig};
use crate::rng;
use crate::scene_io::{sample_patch, sample_ray_batch, PatchSample, Ray, SceneDataset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    MinimizerFirst,
    DiscriminatorFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscChannels {
    pub base_channels: usize,
    pub max_channels: usize,
}

impl DiscChannels {
    pub fn with_patch(self, patch_size: usize) -> DiscriminatorConfig {
        DiscriminatorConfig { patch_size, base_channels: self.base_channels, max_channels: self.max_channels }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub ray_batch: usize,
    pub samples_per_ray: usize,
    pub stratified: bool,
    /// Field patch side; the perceptual term sees it whole.
    pub patch_size: usize,
    /// Side of the non-overlapping tiles the field patch is cut into for
    /// the adversarial terms.
    pub disc_patch_size_nerf: usize,
    pub nerf_iterations: u64,
    pub gen_patch_size: usize,
    pub disc_patch_size_gen: usize,
    pub generator_epochs: u64,
    pub generator_batch: usize,
    pub lambda_adv_nerf: f64,
    pub lambda_perc_nerf: f64,
    pub lambda_gp_nerf: f64,
    pub lambda_adv_gen: f64,
    pub lambda_perc_gen: f64,
    pub lambda_rgb_gen: f64,
    pub lambda_gp_gen: f64,
    pub update_order: UpdateOrder,
    /// Steps (stage 1) or epochs (stage 2) between checkpoints; 0 = final only.
    pub checkpoint_every: u64,
    /// Steps (stage 1) or epochs (stage 2) between validation renders; 0 = never.
    pub validate_every: u64,
    /// Tags of ablations applied to this config, kept for provenance.
    pub ablations: Vec<String>,
    pub field_optimizer: OptimizerConfig,
    pub disc_nerf_optimizer: OptimizerConfig,
    pub generator_optimizer: OptimizerConfig,
    pub disc_gen_optimizer: OptimizerConfig,
    pub field: FieldConfig,
    pub disc_nerf: DiscChannels,
    pub disc_gen: DiscChannels,
    pub generator: GeneratorConfig,
    pub perceptual: PerceptualConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            ray_batch: 4096,
            samples_per_ray: 64,
            stratified: true,
            patch_size: 256,
            disc_patch_size_nerf: 64,
            nerf_iterations: 400_000,
            gen_patch_size: 256,
            disc_patch_size_gen: 128,
            generator_epochs: 3000,
            generator_batch: 8,
            lambda_adv_nerf: 0.0003,
            lambda_perc_nerf: 0.0003,
            lambda_gp_nerf: 0.1,
            lambda_adv_gen: 1.0,
            lambda_perc_gen: 1.0,
            lambda_rgb_gen: 3.0,
            lambda_gp_gen: 5.0,
            update_order: UpdateOrder::MinimizerFirst,
            checkpoint_every: 10_000,
            validate_every: 0,
            ablations: Vec::new(),
            field_optimizer: OptimizerConfig::adam(1e-2),
            disc_nerf_optimizer: OptimizerConfig::rmsprop(1e-3),
            generator_optimizer: OptimizerConfig::adam(2e-3),
            disc_gen_optimizer: OptimizerConfig::adam(2e-3),
            field: FieldConfig::default(),
            disc_nerf: DiscChannels { base_channels: 64, max_channels: 256 },
            disc_gen: DiscChannels { base_channels: 64, max_channels: 256 },
            generator: GeneratorConfig::default(),
            perceptual: PerceptualConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for 64x64 scenes on a single CPU core. Loss weights,
    /// learning rates and the generator batch keep their full-scale values.
    pub fn desk() -> Self {
        TrainConfig {
            ray_batch: 1024,
            samples_per_ray: 32,
            patch_size: 64,
            disc_patch_size_nerf: 16,
            nerf_iterations: 5000,
            gen_patch_size: 32,
            disc_patch_size_gen: 16,
            generator_epochs: 300,
            checkpoint_every: 1000,
            field: FieldConfig::grid(64, 4),
            disc_nerf: DiscChannels { base_channels: 16, max_channels: 32 },
            disc_gen: DiscChannels { base_channels: 16, max_channels: 32 },
            generator: GeneratorConfig {
                levels: 4,
                coarsest_channels: 32,
                min_channels: 16,
                encoder_channels: 8,
                ..GeneratorConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_adv_nerf,
            self.lambda_perc_nerf,
            self.lambda_gp_nerf,
            self.lambda_adv_gen,
            self.lambda_perc_gen,
            self.lambda_rgb_gen,
            self.lambda_gp_gen,
        ];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.ray_batch == 0 || self.samples_per_ray == 0 || self.generator_batch == 0 {
            return Err(Error::invalid("batch sizes and samples per ray must be positive"));
        }
        for (p, s, what) in [
            (self.patch_size, self.disc_patch_size_nerf, "field"),
            (self.gen_patch_size, self.disc_patch_size_gen, "generator"),
        ] {
            if s == 0 || p % s != 0 {
                return Err(Error::invalid(format!("{what} patch {p} is not divisible into {s}-pixel tiles")));
            }
        }
        if self.gen_patch_size % self.generator.divisor() != 0 {
            return Err(Error::invalid(format!(
                "generator patch {} not divisible by {}",
                self.gen_patch_size,
                self.generator.divisor()
            )));
        }
        self.field.validate()?;
        self.generator.validate()?;
        self.disc_nerf.with_patch(self.disc_patch_size_nerf).validate()?;
        self.disc_gen.with_patch(self.disc_patch_size_gen).validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config does not serialize: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::format("training config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render_config(&self, dataset: &SceneDataset) -> Result<RenderConfig> {
        let mut r = RenderConfig::new(dataset.bounds.near, dataset.bounds.far, self.samples_per_ray)?;
        r.stratified = self.stratified;
        Ok(r)
    }

    /// Deterministic renders (bin midpoints) for evaluation and the frozen field.
    pub fn eval_render_config(&self, dataset: &SceneDataset) -> Result<RenderConfig> {
        RenderConfig::new(dataset.bounds.near, dataset.bounds.far, self.samples_per_ray)
    }

    fn patch_losses_active(&self) -> bool {
        self.lambda_adv_nerf > 0.0 || self.lambda_perc_nerf > 0.0
    }
}

/// Append-only CSV of per-step values; only reproducible quantities, so
/// identical runs produce identical files.
#[derive(Clone, Debug, PartialEq)]
pub struct Telemetry {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Telemetry {
    pub fn new(columns: &[&str]) -> Self {
        Telemetry { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn header_line(&self) -> String {
        self.columns.join(",")
    }

    pub fn row_line(row: &[f64]) -> String {
        row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header_line();
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::row_line(r));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("telemetry", "empty file"))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| Error::format("telemetry", format!("line {}: bad value {v:?}", i + 2))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != columns.len() {
                return Err(Error::format("telemetry", format!("line {} has {} fields", i + 2, row.len())));
            }
            rows.push(row);
        }
        Ok(Telemetry { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub const NERF_COLUMNS: [&str; 9] =
    ["step", "rgb", "perceptual", "adversarial", "total", "disc_loss", "r1", "real_logit_mean", "fake_logit_mean"];
pub const GEN_COLUMNS: [&str; 10] =
    ["step", "epoch", "l1", "perceptual", "adversarial", "total", "disc_loss", "r1", "real_logit_mean", "fake_logit_mean"];

/// Layout of a training run on disk.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Create the directory tree and echo the effective config.
    pub fn create(root: &Path, config: &TrainConfig) -> Result<Self> {
        Self::create_with(root, config, "config.toml")
    }

    /// Like [`RunDir::create`], echoing the config to `config_file`.
    pub fn create_with(root: &Path, config: &TrainConfig, config_file: &str) -> Result<Self> {
        for d in [root.to_path_buf(), root.join("checkpoints"), root.join("renders")] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let run = RunDir { root: root.to_path_buf() };
        let path = run.root.join(config_file);
        fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(run)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.bin"))
    }

    pub fn renders(&self) -> PathBuf {
        self.root.join("renders")
    }

    fn open_log(&self, file: &str, header: &str, keep_below: Option<u64>) -> Result<File> {
        let path = self.root.join(file);
        let mut kept = format!("{header}\n");
        if let Some(limit) = keep_below {
            if let Ok(text) = fs::read_to_string(&path) {
                for line in text.lines().skip(1) {
                    let step = line.split(',').next().and_then(|v| v.parse::<f64>().ok());
                    if step.is_some_and(|s| s < limit as f64) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))
    }
}

struct Logs {
    telemetry: File,
    timing: File,
    path: PathBuf,
}

impl Logs {
    fn open(run: &RunDir, prefix: &str, columns: &[&str], resume_step: Option<u64>) -> Result<Self> {
        let telemetry = run.open_log(&format!("{prefix}telemetry.csv"), &columns.join(","), resume_step)?;
        let timing = run.open_log(&format!("{prefix}timing.csv"), "step,seconds", resume_step)?;
        Ok(Logs { telemetry, timing, path: run.root.clone() })
    }

    fn write(&mut self, row: &[f64], seconds: f64) -> Result<()> {
        writeln!(self.telemetry, "{}", Telemetry::row_line(row)).map_err(|e| Error::io(&self.path, e))?;
        writeln!(self.timing, "{:?},{seconds:.6}", row[0]).map_err(|e| Error::io(&self.path, e))
    }
}

/// Mean over rays of the squared color error summed over channels.
pub fn rgb_mse(predicted: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != target.len() {
        return Err(Error::shape(format!("{} predictions for {} targets", predicted.len(), target.len())));
    }
    let sum: f64 =
        predicted.iter().zip(target).map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>()).sum();
    Ok(sum / predicted.len() as f64)
}

/// Color loss of the field on a batch of rays with ground-truth colors.
pub fn nerf_rgb_loss(field: &Field, rays: &[(Ray, [f64; 3])], render: &RenderConfig, seed: u64) -> Result<f64> {
    let only: Vec<Ray> = rays.iter().map(|(r, _)| *r).collect();
    let out = render_rays(field, &only, render, seed);
    let pred: Vec<[f64; 3]> = out.iter().map(|o| o.color).collect();
    let gt: Vec<[f64; 3]> = rays.iter().map(|(_, c)| *c).collect();
    rgb_mse(&pred, &gt)
}

/// `[n, c, h, w] -> [n * (h/s) * (w/s), c, s, s]`, row-major tiles.
pub fn tiles(t: &Tensor, s: usize) -> Tensor {
    let tape = Tape::new();
    let v = tape.constant(t.clone()).subdivide(s).value();
    (*v).clone()
}

fn batch1(im: &Image) -> Tensor {
    im.to_tensor().reshape([1, 3, im.height(), im.width()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct NerfState {
    pub step: u64,
    pub field: Field,
    pub disc: Discriminator,
    pub field_opt: Optimizer,
    pub disc_opt: Optimizer,
}

impl NerfState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let field = Field::new(&cfg.field, &mut rng::stream(cfg.seed, "field-init", 0))?;
        let disc = Discriminator::new(
            &cfg.disc_nerf.with_patch(cfg.disc_patch_size_nerf),
            &mut rng::stream(cfg.seed, "field-disc-init", 0),
        )?;
        let field_opt = Optimizer::new(cfg.field_optimizer, field.params());
        let disc_opt = Optimizer::new(cfg.disc_nerf_optimizer, disc.params());
        Ok(NerfState { step: 0, field, disc, field_opt, disc_opt })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(cfg.to_toml()?, ParamSet::new());
        c.arrays.push("step", Tensor::scalar(self.step as f64));
        c.add_section("field", self.field.params());
        c.add_section("disc", self.disc.params());
        c.add_section("opt", &self.field_opt.state("field"));
        c.add_section("opt", &self.disc_opt.state("disc"));
        Ok(c)
    }

    /// Restore a stage-1 state; the field architecture comes from the
    /// checkpoint, optimizer settings from `cfg`.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let stored = TrainConfig::from_toml(&ckpt.config)?;
        let mut cfg = cfg.clone();
        cfg.field = stored.field;
        cfg.disc_nerf = stored.disc_nerf;
        cfg.disc_patch_size_nerf = stored.disc_patch_size_nerf;
        let mut s = NerfState::new(&cfg)?;
        s.step = ckpt.arrays.by_name("step").ok_or_else(|| Error::Missing("checkpoint step".into()))?.item() as u64;
        s.field.params_mut().load_from(&ckpt.section("field"))?;
        s.disc.params_mut().load_from(&ckpt.section("disc"))?;
        let opt = ckpt.section("opt");
        s.field_opt.restore("field", &opt)?;
        s.disc_opt.restore("disc", &opt)?;
        Ok(s)
    }
}

/// Field parameters and architecture from a stage-1 checkpoint.
pub fn load_field(path: &Path) -> Result<Field> {
    let ckpt = Checkpoint::load(path)?;
    field_from_checkpoint(&ckpt)
}

pub fn field_from_checkpoint(ckpt: &Checkpoint) -> Result<Field> {
    let cfg = TrainConfig::from_toml(&ckpt.config)?;
    let mut field = Field::new(&cfg.field, &mut rng::stream(0, "field-shape", 0))?;
    let stored = ckpt.section("field");
    if stored.is_empty() {
        return Err(Error::Missing(format!("no field parameters in checkpoint ({} arrays)", ckpt.arrays.len())));
    }
    field.params_mut().load_from(&stored)?;
    Ok(field)
}

/// Everything random about one stage-1 step.
#[derive(Clone, Debug)]
pub struct NerfBatch {
    pub step: u64,
    pub rays: Vec<(Ray, [f64; 3])>,
    pub patch: Option<PatchSample>,
    pub ray_seed: u64,
    pub patch_seed: u64,
}

pub fn sample_nerf_batch(dataset: &SceneDataset, cfg: &TrainConfig, step: u64) -> Result<NerfBatch> {
    let rays = sample_ray_batch(dataset, cfg.ray_batch, &mut rng::stream(cfg.seed, "nerf-rays", step))?;
    let patch = if cfg.patch_losses_active() {
        Some(sample_patch(dataset, cfg.patch_size, &mut rng::stream(cfg.seed, "nerf-patch", step))?)
    } else {
        None
    };
    Ok(NerfBatch {
        step,
        rays,
        patch,
        ray_seed: rng::child_seed(cfg.seed, "nerf-ray-samples", step),
        patch_seed: rng::child_seed(cfg.seed, "nerf-patch-samples", step),
    })
}

/// Weights of the stage-1 minimizer terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NerfWeights {
    pub rgb: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl NerfWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        NerfWeights { rgb: 1.0, perceptual: cfg.lambda_perc_nerf, adversarial: cfg.lambda_adv_nerf }
    }
}

/// Unweighted values of the stage-1 minimizer terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NerfTerms {
    pub rgb: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

/// Render the batch's patch with the current field (detached).
pub fn render_batch_patch(field: &Field, batch: &NerfBatch, render: &RenderConfig) -> Result<Option<Tensor>> {
    let Some(p) = &batch.patch else { return Ok(None) };
    let s = p.size();
    let out = render_rays(field, &p.rays, render, batch.patch_seed);
    let data: Vec<f64> = out.iter().flat_map(|o| o.color).collect();
    Ok(Some(batch1(&Image::new(s, s, data)?)))
}

/// Field gradient of `w.rgb * L_rgb + w.perceptual * L_perc + w.adversarial * L_adv`.
/// `rendered_patch` must be [`render_batch_patch`] of the current field.
pub fn nerf_minimizer_gradients(
    state: &NerfState,
    batch: &NerfBatch,
    rendered_patch: Option<&Tensor>,
    render: &RenderConfig,
    extractor: &FeatureExtractor,
    weights: NerfWeights,
    disc_tile: usize,
) -> Result<(Vec<Tensor>, NerfTerms)> {
    let mut grads = state.field.params().zeros_like();
    let mut terms = NerfTerms::default();

    let rays: Vec<Ray> = batch.rays.iter().map(|(r, _)| *r).collect();
    let n = rays.len() as f64;
    let mut sq = 0.0;
    render_rays_backward(
        &state.field,
        &rays,
        render,
        batch.ray_seed,
        |i, o| {
            let gt = batch.rays[i].1;
            let mut dc = [0.0; 3];
            for c in 0..3 {
                let e = o.color[c] - gt[c];
                sq += e * e;
                dc[c] = weights.rgb * 2.0 * e / n;
            }
            (dc, 0.0)
        },
        &mut grads,
    );
    terms.rgb = sq / n;

    if let (Some(patch), Some(fake)) = (&batch.patch, rendered_patch) {
        let tape = Tape::new();
        let x = tape.var(fake.clone());
        let reference = extractor.extract(&batch1(&patch.colors))?;
        let perc = perceptual_loss_to(extractor, x, &reference)?;
        let adv = minimizer_loss_var(&state.disc, &tape, x.subdivide(disc_tile))?;
        terms.perceptual = perc.value().item();
        terms.adversarial = adv.value().item();
        let total = perc.scale(weights.perceptual).add(adv.scale(weights.adversarial));
        let d_patch = tape.gradients(total, &[x]).remove(0);
        let s = patch.size();
        let dp = d_patch.data();
        render_rays_backward(
            &state.field,
            &patch.rays,
            render,
            batch.patch_seed,
            |i, _| {
                let (r, c) = (i / s, i % s);
                ([dp[r * s + c], dp[s * s + r * s + c], dp[2 * s * s + r * s + c]], 0.0)
            },
            &mut grads,
        );
    }
    Ok((grads, terms))
}

/// Which sub-updates a step performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOptions {
    pub update_minimizer: bool,
    pub update_discriminator: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { update_minimizer: true, update_discriminator: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscRecord {
    pub loss: f64,
    pub r1: f64,
    pub real_logit_mean: f64,
    pub fake_logit_mean: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn disc_update(
    disc: &mut Discriminator,
    opt: &mut Optimizer,
    fake: &Tensor,
    real: &Tensor,
    tile: usize,
    lambda_gp: f64,
) -> Result<DiscRecord> {
    let (grads, terms) = discriminator_gradients(disc, &tiles(fake, tile), &tiles(real, tile), lambda_gp)?;
    let rec = DiscRecord {
        loss: terms.loss_for_discriminator,
        r1: terms.r1_penalty,
        real_logit_mean: mean(&terms.real_logits),
        fake_logit_mean: mean(&terms.fake_logits),
    };
    if !(rec.loss.is_finite() && rec.r1.is_finite()) {
        return Err(Error::NonFinite(format!("discriminator loss {} (r1 {})", rec.loss, rec.r1)));
    }
    opt.step(disc.params_mut(), &grads)?;
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NerfStepRecord {
    pub step: u64,
    pub terms: NerfTerms,
    pub total: f64,
    pub disc: DiscRecord,
}

impl NerfStepRecord {
    pub fn row(&self) -> Vec<f64> {
        vec![
            self.step as f64,
            self.terms.rgb,
            self.terms.perceptual,
            self.terms.adversarial,
            self.total,
            self.disc.loss,
            self.disc.r1,
            self.disc.real_logit_mean,
            self.disc.fake_logit_mean,
        ]
    }
}

fn describe_patch(batch: &NerfBatch) -> String {
    match &batch.patch {
        Some(p) => format!("patch of image {} at {:?}", p.source_image_index, p.pixel_origin),
        None => "no patch".into(),
    }
}

/// One alternating round of stage 1.
pub fn nerf_train_step(
    state: &mut NerfState,
    dataset: &SceneDataset,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    options: StepOptions,
) -> Result<NerfStepRecord> {
    let render = cfg.render_config(dataset)?;
    let batch = sample_nerf_batch(dataset, cfg, state.step)?;
    let fake = render_batch_patch(&state.field, &batch, &render)?;
    let disc_active = options.update_discriminator && cfg.lambda_adv_nerf > 0.0 && fake.is_some();
    let real = batch.patch.as_ref().map(|p| batch1(&p.colors));
    let mut disc = DiscRecord::default();
    let run_disc = |state: &mut NerfState| -> Result<DiscRecord> {
        let (f, r) = (fake.as_ref().expect("patch"), real.as_ref().expect("patch"));
        disc_update(&mut state.disc, &mut state.disc_opt, f, r, cfg.disc_patch_size_nerf, cfg.lambda_gp_nerf)
            .map_err(|e| with_context(e, state.step, &describe_patch(&batch)))
    };
    if disc_active && cfg.update_order == UpdateOrder::DiscriminatorFirst {
        disc = run_disc(state)?;
    }
    let weights = NerfWeights::from_config(cfg);
    let (grads, terms) =
        nerf_minimizer_gradients(state, &batch, fake.as_ref(), &render, extractor, weights, cfg.disc_patch_size_nerf)?;
    let total = weights.rgb * terms.rgb + weights.perceptual * terms.perceptual + weights.adversarial * terms.adversarial;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {}: rgb {} perceptual {} adversarial {} ({})",
            state.step,
            terms.rgb,
            terms.perceptual,
            terms.adversarial,
            describe_patch(&batch)
        )));
    }
    if options.update_minimizer {
        state.field_opt.step(state.field.params_mut(), &grads).map_err(|e| with_context(e, state.step, &describe_patch(&batch)))?;
    }
    if disc_active && cfg.update_order == UpdateOrder::MinimizerFirst {
        disc = run_disc(state)?;
    }
    let rec = NerfStepRecord { step: state.step, terms, total, disc };
    state.step += 1;
    Ok(rec)
}

fn with_context(e: Error, step: u64, what: &str) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m} ({what})")),
        other => other,
    }
}

fn write_nonfinite_dump(run: &RunDir, step: u64, e: &Error) {
    let path = run.root.join(format!("nonfinite_step{step}.txt"));
    let _ = fs::write(path, format!("{e}\n"));
}

/// Stage 1: loop [`nerf_train_step`] with checkpoints and telemetry.
/// `resume` continues from a stage-1 checkpoint.
pub fn train_nerf(dataset: &SceneDataset, cfg: &TrainConfig, run: &RunDir, resume: Option<&Path>) -> Result<NerfState> {
    cfg.validate()?;
    dataset.validate()?;
    let extractor = FeatureExtractor::new(&cfg.perceptual)?;
    let mut state = match resume {
        Some(p) => NerfState::from_checkpoint(&Checkpoint::load(p)?, cfg)?,
        None => NerfState::new(cfg)?,
    };
    let mut logs = Logs::open(run, "", &NERF_COLUMNS, resume.map(|_| state.step))?;
    while state.step < cfg.nerf_iterations {
        let started = Instant::now();
        let step = state.step;
        let rec = match nerf_train_step(&mut state, dataset, cfg, &extractor, StepOptions::default()) {
            Ok(r) => r,
            Err(e) => {
                if matches!(e, Error::NonFinite(_)) {
                    write_nonfinite_dump(run, step, &e);
                }
                return Err(e);
            }
        };
        logs.write(&rec.row(), started.elapsed().as_secs_f64())?;
        let done = state.step;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.nerf_iterations {
            state.to_checkpoint(cfg)?.save(&run.checkpoint(&format!("field_step{done:08}")))?;
        }
        if cfg.validate_every > 0 && done % cfg.validate_every == 0 && !dataset.test_images.is_empty() {
            let view = &dataset.test_images[0];
            let (im, _) = render_image(&state.field, &view.intrinsics, &view.pose, &cfg.eval_render_config(dataset)?, 0, 4096)?;
            im.save_png8(&run.renders().join(format!("field_step{done:08}.png")))?;
        }
    }
    state.to_checkpoint(cfg)?.save(&run.checkpoint("field_final"))?;
    Ok(state)
}

/// Frozen-field renders of whole training images, keyed by the field
/// fingerprint and image index. With caching disabled every patch is
/// rendered from its own rays; both paths use deterministic bin
/// midpoints and give identical pixels.
pub struct RenderCache {
    enabled: bool,
    images: HashMap<(String, usize), Image>,
}

impl RenderCache {
    pub fn new(enabled: bool) -> Self {
        RenderCache { enabled, images: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn patch(
        &mut self,
        field: &Field,
        field_hash: &str,
        dataset: &SceneDataset,
        render: &RenderConfig,
        index: usize,
        origin: (usize, usize),
        size: usize,
    ) -> Result<Image> {
        let view = dataset.train_images.get(index).ok_or_else(|| Error::OutOfBounds(format!("train image {index}")))?;
        if !self.enabled {
            let p = PatchSample::from_image(view, index, origin.0, origin.1, size)?;
            let out = render_rays(field, &p.rays, render, 0);
            return Image::new(size, size, out.iter().flat_map(|o| o.color).collect());
        }
        let key = (field_hash.to_string(), index);
        if !self.images.contains_key(&key) {
            let (im, _) = render_image(field, &view.intrinsics, &view.pose, render, 0, 4096)?;
            self.images.insert(key.clone(), im);
        }
        self.images[&key].crop(origin.0, origin.1, size, size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    pub step: u64,
    pub epoch: u64,
    pub generator: Generator,
    pub disc: Discriminator,
    pub gen_opt: Optimizer,
    pub disc_opt: Optimizer,
}

impl GeneratorState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(&cfg.generator, &mut rng::stream(cfg.seed, "generator-init", 0))?;
        let disc = Discriminator::new(
            &cfg.disc_gen.with_patch(cfg.disc_patch_size_gen),
            &mut rng::stream(cfg.seed, "generator-disc-init", 0),
        )?;
        let gen_opt = Optimizer::new(cfg.generator_optimizer, generator.params());
        let disc_opt = Optimizer::new(cfg.disc_gen_optimizer, disc.params());
        Ok(GeneratorState { step: 0, epoch: 0, generator, disc, gen_opt, disc_opt })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig, field_hash: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(cfg.to_toml()?, ParamSet::new());
        c.arrays.push("step", Tensor::scalar(self.step as f64));
        c.arrays.push("epoch", Tensor::scalar(self.epoch as f64));
        let hash_bytes: Vec<f64> = hex::decode(field_hash).unwrap_or_default().into_iter().map(f64::from).collect();
        c.arrays.push("field_fingerprint", Tensor::new([hash_bytes.len()], hash_bytes));
        c.add_section("generator", self.generator.params());
        c.add_section("disc", self.disc.params());
        c.add_section("opt", &self.gen_opt.state("generator"));
        c.add_section("opt", &self.disc_opt.state("disc"));
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let stored = TrainConfig::from_toml(&ckpt.config)?;
        let mut cfg = cfg.clone();
        cfg.generator = stored.generator;
        cfg.disc_gen = stored.disc_gen;
        cfg.disc_patch_size_gen = stored.disc_patch_size_gen;
        let mut s = GeneratorState::new(&cfg)?;
        let scalar = |name: &str| -> Result<u64> {
            Ok(ckpt.arrays.by_name(name).ok_or_else(|| Error::Missing(format!("checkpoint {name}")))?.item() as u64)
        };
        s.step = scalar("step")?;
        s.epoch = scalar("epoch")?;
        s.generator.params_mut().load_from(&ckpt.section("generator"))?;
        s.disc.params_mut().load_from(&ckpt.section("disc"))?;
        let opt = ckpt.section("opt");
        s.gen_opt.restore("generator", &opt)?;
        s.disc_opt.restore("disc", &opt)?;
        Ok(s)
    }
}

/// Generator and its architecture from a stage-2 checkpoint.
pub fn load_generator(path: &Path) -> Result<Generator> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = TrainConfig::from_toml(&ckpt.config)?;
    let stored = ckpt.section("generator");
    if stored.is_empty() {
        return Err(Error::Missing(format!("no generator parameters in {}", path.display())));
    }
    Generator::from_params(&cfg.generator, &stored)
}

#[derive(Clone, Debug)]
pub struct GeneratorBatch {
    /// Frozen-field renders `[n, 3, s, s]`.
    pub inputs: Tensor,
    /// Ground truth `[n, 3, s, s]`.
    pub targets: Tensor,
    pub noise_seed: u64,
}

/// Image order of an epoch.
pub fn epoch_order(cfg: &TrainConfig, images: usize, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..images).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "generator-epoch", epoch));
    order
}

pub fn steps_per_epoch(cfg: &TrainConfig, images: usize) -> u64 {
    images.div_ceil(cfg.generator_batch) as u64
}

#[allow(clippy::too_many_arguments)]
pub fn sample_generator_batch(
    dataset: &SceneDataset,
    field: &Field,
    field_hash: &str,
    cache: &mut RenderCache,
    cfg: &TrainConfig,
    step: u64,
    images: &[usize],
) -> Result<GeneratorBatch> {
    use rand::Rng as _;
    let render = cfg.eval_render_config(dataset)?;
    let s = cfg.gen_patch_size;
    let mut r = rng::stream(cfg.seed, "generator-patch", step);
    let mut inputs = Vec::with_capacity(images.len());
    let mut targets = Vec::with_capacity(images.len());
    for &i in images {
        let view = &dataset.train_images[i];
        let (h, w) = (view.pixels.height(), view.pixels.width());
        if s > h || s > w {
            return Err(Error::OutOfBounds(format!("generator patch {s} exceeds a {h}x{w} image")));
        }
        let origin = (r.gen_range(0..=h - s), r.gen_range(0..=w - s));
        inputs.push(cache.patch(field, field_hash, dataset, &render, i, origin, s)?);
        targets.push(view.pixels.crop(origin.0, origin.1, s, s)?);
    }
    Ok(GeneratorBatch {
        inputs: Image::batch_to_tensor(&inputs)?,
        targets: Image::batch_to_tensor(&targets)?,
        noise_seed: rng::child_seed(cfg.seed, "generator-noise", step),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl GenWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        GenWeights { l1: cfg.lambda_rgb_gen, perceptual: cfg.lambda_perc_gen, adversarial: cfg.lambda_adv_gen }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GenTerms {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

/// Generator gradient of the weighted stage-2 objective and the refined
/// batch (detached).
pub fn generator_minimizer_gradients(
    generator: &Generator,
    disc: &Discriminator,
    batch: &GeneratorBatch,
    extractor: &FeatureExtractor,
    weights: GenWeights,
    disc_tile: usize,
) -> Result<(Vec<Tensor>, GenTerms, Tensor)> {
    let tape = Tape::new();
    let params = generator.params().bind(&tape, true);
    let out = generator.forward(&params, tape.constant(batch.inputs.clone()), &NoiseSpec::Sampled(batch.noise_seed))?;
    let target = tape.constant(batch.targets.clone());
    let l1 = out.sub(target).abs().mean();
    let mut total = l1.scale(weights.l1);
    let mut terms = GenTerms { l1: l1.value().item(), ..GenTerms::default() };
    if weights.perceptual > 0.0 {
        let reference = extractor.extract(&batch.targets)?;
        let perc = perceptual_loss_to(extractor, out, &reference)?;
        terms.perceptual = perc.value().item();
        total = total.add(perc.scale(weights.perceptual));
    }
    if weights.adversarial > 0.0 {
        let adv = minimizer_loss_var(disc, &tape, out.subdivide(disc_tile))?;
        terms.adversarial = adv.value().item();
        total = total.add(adv.scale(weights.adversarial));
    }
    let grads = tape.gradients(total, &params);
    let refined = (*out.value()).clone();
    Ok((grads, terms, refined))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenStepRecord {
    pub step: u64,
    pub epoch: u64,
    pub terms: GenTerms,
    pub total: f64,
    pub disc: DiscRecord,
}

impl GenStepRecord {
    pub fn row(&self) -> Vec<f64> {
        vec![
            self.step as f64,
            self.epoch as f64,
            self.terms.l1,
            self.terms.perceptual,
            self.terms.adversarial,
            self.total,
            self.disc.loss,
            self.disc.r1,
            self.disc.real_logit_mean,
            self.disc.fake_logit_mean,
        ]
    }
}

/// One alternating round of stage 2 on a prepared batch.
pub fn generator_train_step(
    state: &mut GeneratorState,
    batch: &GeneratorBatch,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    options: StepOptions,
) -> Result<GenStepRecord> {
    let weights = GenWeights::from_config(cfg);
    let disc_active = options.update_discriminator && cfg.lambda_adv_gen > 0.0;
    let mut disc = DiscRecord::default();
    let tile = cfg.disc_patch_size_gen;
    if disc_active && cfg.update_order == UpdateOrder::DiscriminatorFirst {
        let fake = state.generator.forward_tensor(&batch.inputs, &NoiseSpec::Sampled(batch.noise_seed))?;
        disc = disc_update(&mut state.disc, &mut state.disc_opt, &fake, &batch.targets, tile, cfg.lambda_gp_gen)?;
    }
    let (grads, terms, fake) = generator_minimizer_gradients(&state.generator, &state.disc, batch, extractor, weights, tile)?;
    let total = weights.l1 * terms.l1 + weights.perceptual * terms.perceptual + weights.adversarial * terms.adversarial;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "generator step {}: l1 {} perceptual {} adversarial {}",
            state.step, terms.l1, terms.perceptual, terms.adversarial
        )));
    }
    if options.update_minimizer {
        state.gen_opt.step(state.generator.params_mut(), &grads)?;
    }
    if disc_active && cfg.update_order == UpdateOrder::MinimizerFirst {
        disc = disc_update(&mut state.disc, &mut state.disc_opt, &fake, &batch.targets, tile, cfg.lambda_gp_gen)?;
    }
    let rec = GenStepRecord { step: state.step, epoch: state.epoch, terms, total, disc };
    state.step += 1;
    Ok(rec)
}

/// Stage 2: loop [`generator_train_step`] over epochs of the training
/// images with the field frozen. Fails if the field changes.
pub fn train_generator(
    dataset: &SceneDataset,
    field: &Field,
    cfg: &TrainConfig,
    run: &RunDir,
    resume: Option<&Path>,
    cache_renders: bool,
) -> Result<GeneratorState> {
    cfg.validate()?;
    dataset.validate()?;
    let extractor = FeatureExtractor::new(&cfg.perceptual)?;
    let field_hash = field.params().fingerprint();
    let mut state = match resume {
        Some(p) => GeneratorState::from_checkpoint(&Checkpoint::load(p)?, cfg)?,
        None => GeneratorState::new(cfg)?,
    };
    let mut logs = Logs::open(run, "generator_", &GEN_COLUMNS, resume.map(|_| state.step))?;
    let mut cache = RenderCache::new(cache_renders);
    let n = dataset.train_images.len();
    let per_epoch = steps_per_epoch(cfg, n);
    while state.epoch < cfg.generator_epochs {
        let order = epoch_order(cfg, n, state.epoch);
        let first = (state.step - state.epoch * per_epoch) as usize;
        for chunk in order.chunks(cfg.generator_batch).skip(first) {
            let started = Instant::now();
            let batch = sample_generator_batch(dataset, field, &field_hash, &mut cache, cfg, state.step, chunk)?;
            let step = state.step;
            let rec = match generator_train_step(&mut state, &batch, cfg, &extractor, StepOptions::default()) {
                Ok(r) => r,
                Err(e) => {
                    if matches!(e, Error::NonFinite(_)) {
                        write_nonfinite_dump(run, step, &e);
                    }
                    return Err(e);
                }
            };
            if field.params().fingerprint() != field_hash {
                return Err(Error::FrozenViolation("field parameters changed during generator training".into()));
            }
            logs.write(&rec.row(), started.elapsed().as_secs_f64())?;
        }
        state.epoch += 1;
        let e = state.epoch;
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 && e < cfg.generator_epochs {
            state.to_checkpoint(cfg, &field_hash)?.save(&run.checkpoint(&format!("generator_epoch{e:06}")))?;
        }
        if cfg.validate_every > 0 && e % cfg.validate_every == 0 && !dataset.test_images.is_empty() {
            let view = &dataset.test_images[0];
            let (im, _) = render_image(field, &view.intrinsics, &view.pose, &cfg.eval_render_config(dataset)?, 0, 4096)?;
            let refined = state.generator.refine_padded(&im, &NoiseSpec::Zero)?;
            refined.save_png8(&run.renders().join(format!("generator_epoch{e:06}.png")))?;
        }
    }
    state.to_checkpoint(cfg, &field_hash)?.save(&run.checkpoint("generator_final"))?;
    Ok(state)
}
