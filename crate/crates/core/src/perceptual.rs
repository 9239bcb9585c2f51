//! Frozen feature pyramids and the perceptual distance built on them.
//!
//! The distance between two patches is
//! `Σ_k ‖φ_k(a) − φ_k(b)‖² / n_k`, where `φ_k` is stage `k` of the pyramid
//! and `n_k` its entry count per patch, averaged over the batch.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn;
use crate::rng;
use crate::tensor::Tensor;

pub const STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Fixed-seed random 3x3 convolutions, one per stage, leaky
    /// activations and average pooling between stages.
    RandomPyramid { channels: [usize; STAGES], seed: u64 },
    /// VGG-style weights read from a checkpoint container with arrays
    /// `stage{k}/conv{j}/w` and `stage{k}/conv{j}/b`; relu activations and
    /// max pooling between stages.
    Pretrained { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    pub backend: BackendConfig,
    /// Input transform `(x - shift) * scale` per channel.
    pub input_shift: [f64; 3],
    pub input_scale: [f64; 3],
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            backend: BackendConfig::RandomPyramid { channels: [16, 32, 48, 64, 64], seed: 0x5eed },
            input_shift: [0.5; 3],
            input_scale: [2.0; 3],
        }
    }
}

/// Raw (un-normalized) stage maps of a `[n, 3, h, w]` batch.
pub trait FeatureBackend {
    fn stages<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pool {
    Avg,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    config: PerceptualConfig,
    /// Convolutions of each stage: weight and optional bias.
    stages: Vec<Vec<(Tensor, Option<Tensor>)>>,
    leak: f64,
    pool: Pool,
}

impl FeatureExtractor {
    pub fn new(config: &PerceptualConfig) -> Result<Self> {
        match &config.backend {
            BackendConfig::RandomPyramid { channels, seed } => {
                if channels.iter().any(|&c| c == 0) {
                    return Err(Error::invalid("feature channels must be positive"));
                }
                let mut r = rng::stream(*seed, "feature-pyramid", 0);
                let mut stages = Vec::with_capacity(STAGES);
                let mut inp = 3;
                for &c in channels {
                    let w = nn::he_normal(&[c, inp, 3, 3], inp * 9, 1.0, &mut r);
                    stages.push(vec![(w, None)]);
                    inp = c;
                }
                Ok(FeatureExtractor { config: config.clone(), stages, leak: 0.2, pool: Pool::Avg })
            }
            BackendConfig::Pretrained { path } => {
                let ckpt = Checkpoint::load(path)?;
                let mut stages = Vec::with_capacity(STAGES);
                let mut inp = 3;
                for k in 0..STAGES {
                    let mut convs = Vec::new();
                    for j in 0.. {
                        let Some(w) = ckpt.arrays.by_name(&format!("stage{k}/conv{j}/w")) else { break };
                        let b = ckpt.arrays.by_name(&format!("stage{k}/conv{j}/b")).cloned();
                        let s = w.shape();
                        if s.len() != 4 || s[1] != inp || s[2] != 3 || s[3] != 3 {
                            return Err(Error::format("feature weights", format!("stage{k}/conv{j} has shape {s:?}")));
                        }
                        if b.as_ref().is_some_and(|b| b.shape() != [s[0]]) {
                            return Err(Error::format("feature weights", format!("stage{k}/conv{j} bias shape")));
                        }
                        inp = s[0];
                        convs.push((w.clone(), b));
                    }
                    if convs.is_empty() {
                        return Err(Error::format("feature weights", format!("stage {k} has no convolutions")));
                    }
                    stages.push(convs);
                }
                Ok(FeatureExtractor { config: config.clone(), stages, leak: 0.0, pool: Pool::Max })
            }
        }
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.config
    }

    /// SHA-256 of every weight, for the frozen-weights contract.
    pub fn fingerprint(&self) -> String {
        let mut p = nn::ParamSet::new();
        for (k, convs) in self.stages.iter().enumerate() {
            for (j, (w, b)) in convs.iter().enumerate() {
                p.push(format!("{k}/{j}/w"), w.clone());
                if let Some(b) = b {
                    p.push(format!("{k}/{j}/b"), b.clone());
                }
            }
        }
        p.fingerprint()
    }

    fn check_input(shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!("feature input must be [n, 3, h, w], got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        if h < 32 || w < 32 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid(format!("feature input {h}x{w} must be at least 32x32 and divisible by 16")));
        }
        Ok(())
    }

    /// Normalized pyramid of a constant batch.
    pub fn extract(&self, patches: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let x = tape.constant(patches.clone());
        let maps = normalized_stages(self, x)?;
        Ok(maps.iter().map(|m| (*m.value()).clone()).collect())
    }
}

impl FeatureBackend for FeatureExtractor {
    fn stages<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        Self::check_input(&x.shape())?;
        let tape = x.tape();
        let (n, _, h, w) = x.value().dims4();
        let shift = tape.constant(Tensor::new([3], self.config.input_shift.to_vec())).channel_bcast(n, h, w);
        let scale = tape.constant(Tensor::new([3], self.config.input_scale.to_vec())).channel_bcast(n, h, w);
        let mut cur = x.sub(shift).mul(scale);
        let mut out = Vec::with_capacity(self.stages.len());
        for (k, convs) in self.stages.iter().enumerate() {
            if k > 0 {
                cur = match self.pool {
                    Pool::Avg => cur.avg_pool2(),
                    Pool::Max => cur.max_pool2(),
                };
            }
            for (wt, b) in convs {
                cur = cur.conv2d(tape.constant(wt.clone()), 1, 1);
                if let Some(b) = b {
                    cur = cur.add_channel_bias(tape.constant(b.clone()));
                }
                cur = if self.leak == 0.0 { cur.relu() } else { cur.leaky_relu(self.leak) };
            }
            out.push(cur);
        }
        Ok(out)
    }
}

/// Stage maps divided by the square root of their per-patch entry count.
pub fn normalized_stages<'t, B: FeatureBackend + ?Sized>(backend: &B, x: Var<'t>) -> Result<Vec<Var<'t>>> {
    Ok(backend
        .stages(x)?
        .into_iter()
        .map(|m| {
            let s = m.shape();
            let per_patch: usize = s[1..].iter().product();
            m.scale(1.0 / (per_patch as f64).sqrt())
        })
        .collect())
}

/// Perceptual distance between a differentiable batch and constant
/// reference features (from [`FeatureExtractor::extract`] or
/// [`normalized_stages`]).
pub fn perceptual_loss_to<'t, B: FeatureBackend + ?Sized>(backend: &B, fake: Var<'t>, reference: &[Tensor]) -> Result<Var<'t>> {
    let tape = fake.tape();
    let maps = normalized_stages(backend, fake)?;
    if maps.len() != reference.len() {
        return Err(Error::shape("reference pyramid has a different stage count"));
    }
    let n = fake.shape()[0] as f64;
    let mut total: Option<Var<'t>> = None;
    for (m, r) in maps.iter().zip(reference) {
        if m.shape() != r.shape() {
            return Err(Error::shape(format!("stage shape {:?} vs reference {:?}", m.shape(), r.shape())));
        }
        let d = m.sub(tape.constant(r.clone())).square().sum();
        total = Some(match total {
            Some(t) => t.add(d),
            None => d,
        });
    }
    Ok(total.expect("at least one stage").scale(1.0 / n))
}

/// Perceptual distance between two differentiable batches.
pub fn perceptual_loss_var<'t, B: FeatureBackend + ?Sized>(backend: &B, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("perceptual inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    let ma = normalized_stages(backend, a)?;
    let mb = normalized_stages(backend, b)?;
    let n = a.shape()[0] as f64;
    let mut total: Option<Var<'t>> = None;
    for (x, y) in ma.iter().zip(&mb) {
        let d = x.sub(*y).square().sum();
        total = Some(match total {
            Some(t) => t.add(d),
            None => d,
        });
    }
    Ok(total.expect("at least one stage").scale(1.0 / n))
}

/// Value of the perceptual distance between two constant batches.
pub fn perceptual_loss<B: FeatureBackend + ?Sized>(backend: &B, a: &Tensor, b: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(perceptual_loss_var(backend, tape.constant(a.clone()), tape.constant(b.clone()))?.value().item())
}

/// Per-patch perceptual distances of two equally shaped batches.
pub fn perceptual_distances<B: FeatureBackend + ?Sized>(backend: &B, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let n = a.shape().first().copied().unwrap_or(0);
    let per = a.numel() / n.max(1);
    (0..n)
        .map(|i| {
            let mut shape = a.shape().to_vec();
            shape[0] = 1;
            let ai = Tensor::new(shape.clone(), a.data()[i * per..(i + 1) * per].to_vec());
            let bi = Tensor::new(shape, b.data()[i * per..(i + 1) * per].to_vec());
            perceptual_loss(backend, &ai, &bi)
        })
        .collect()
}
