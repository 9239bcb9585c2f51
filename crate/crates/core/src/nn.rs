//! Named parameter sets, initializers and optimizers shared by all networks.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor and return its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Put every tensor on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replace values from another set with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape("parameter names differ from the stored set"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape(format!("stored shape {:?} vs expected {:?}", src.shape(), dst.shape())));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// He-normal initialization for a weight with `fan_in` inputs.
pub fn he_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    normal(shape, std, rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, lr_decay: f64 },
    Rmsprop { lr: f64, alpha: f64, eps: f64, lr_decay: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, lr_decay: 1.0 }
    }

    pub fn rmsprop(lr: f64) -> Self {
        OptimizerConfig::Rmsprop { lr, alpha: 0.99, eps: 1e-8, lr_decay: 1.0 }
    }
}

/// First-order optimizer with its moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let first = match config {
            OptimizerConfig::Adam { .. } => params.zeros_like(),
            OptimizerConfig::Rmsprop { .. } => Vec::new(),
        };
        Optimizer { config, step: 0, first, second: params.zeros_like() }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (g, p) in grads.iter().zip(params.tensors()) {
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        match self.config {
            OptimizerConfig::Adam { lr, beta1, beta2, eps, lr_decay } => {
                let lr = lr * lr_decay.powf(t - 1.0);
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for (i, p) in params.tensors_mut().iter_mut().enumerate() {
                    let g = grads[i].data();
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Rmsprop { lr, alpha, eps, lr_decay } => {
                let lr = lr * lr_decay.powf(t - 1.0);
                for (i, p) in params.tensors_mut().iter_mut().enumerate() {
                    let g = grads[i].data();
                    let v = self.second[i].data_mut();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        v[j] = alpha * v[j] + (1.0 - alpha) * g[j] * g[j];
                        *w -= lr * g[j] / (v[j].sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers and step count as named arrays, for checkpoints.
    pub fn state(&self, prefix: &str) -> ParamSet {
        let mut s = ParamSet::new();
        s.push(format!("{prefix}/step"), Tensor::scalar(self.step as f64));
        for (i, t) in self.first.iter().enumerate() {
            s.push(format!("{prefix}/m/{i}"), t.clone());
        }
        for (i, t) in self.second.iter().enumerate() {
            s.push(format!("{prefix}/v/{i}"), t.clone());
        }
        s
    }

    pub fn restore(&mut self, prefix: &str, state: &ParamSet) -> Result<()> {
        let step = state
            .by_name(&format!("{prefix}/step"))
            .ok_or_else(|| Error::Missing(format!("optimizer state {prefix}")))?;
        self.step = step.item() as u64;
        let fill = |bufs: &mut Vec<Tensor>, tag: &str| -> Result<()> {
            for (i, b) in bufs.iter_mut().enumerate() {
                let t = state
                    .by_name(&format!("{prefix}/{tag}/{i}"))
                    .ok_or_else(|| Error::Missing(format!("optimizer buffer {prefix}/{tag}/{i}")))?;
                if t.shape() != b.shape() {
                    return Err(Error::shape(format!("optimizer buffer {prefix}/{tag}/{i}")));
                }
                *b = t.clone();
            }
            Ok(())
        };
        fill(&mut self.first, "m")?;
        fill(&mut self.second, "v")?;
        Ok(())
    }
}
