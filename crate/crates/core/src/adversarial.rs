//! Patch discriminators and the regularized logistic GAN objective.
//!
//! Convention: the objective `E[f(D(fake)) + f(-D(real)) - λ‖∇D(real)‖²]`
//! with `f(x) = -log(1 + e^-x)` is maximized by the discriminator and its
//! first term minimized by the image producer. Under this convention a
//! large logit means "fake".

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;

/// `f(x) = -softplus(-x)`, stable for large `|x|`.
pub fn f_logistic(x: f64) -> f64 {
    -softplus(-x)
}

fn f_logistic_var<'t>(x: Var<'t>) -> Var<'t> {
    x.neg().softplus().neg()
}

/// Anything mapping a `[n, 3, s, s]` batch to `n` logits on the tape.
pub trait Critic {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// `params` are the tape bindings of [`Critic::params`], in order.
    fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub patch_size: usize,
    /// Channels at full resolution; doubled per halving up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.patch_size;
        if s < 4 || !s.is_power_of_two() {
            return Err(Error::invalid(format!("discriminator patch size {s} must be a power of two >= 4")));
        }
        if self.base_channels == 0 || self.max_channels == 0 {
            return Err(Error::invalid("discriminator channels must be positive"));
        }
        Ok(())
    }

    /// Down-sampling residual blocks: `log2(S) - 2`, ending at 4x4.
    pub fn blocks(&self) -> usize {
        self.patch_size.trailing_zeros() as usize - 2
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level.min(20)).min(self.max_channels).max(1)
    }
}

/// Residual patch discriminator: 1x1 input projection, `log2(S) - 2`
/// blocks of two 3x3 convolutions with a pooled 1x1 skip, then a 3x3
/// convolution and two dense layers at 4x4.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
}

impl Discriminator {
    pub fn new(config: &DiscriminatorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let conv = |p: &mut ParamSet, name: &str, out: usize, inp: usize, k: usize, bias: bool, rng: &mut Rng| {
            p.push(format!("{name}/w"), nn::he_normal(&[out, inp, k, k], inp * k * k, 1.0, rng));
            if bias {
                p.push(format!("{name}/b"), Tensor::zeros([out]));
            }
        };
        conv(&mut p, "from_rgb", config.channels(0), 3, 1, true, rng);
        for b in 0..config.blocks() {
            let (ci, co) = (config.channels(b), config.channels(b + 1));
            conv(&mut p, &format!("block{b}/conv0"), ci, ci, 3, true, rng);
            conv(&mut p, &format!("block{b}/conv1"), co, ci, 3, true, rng);
            conv(&mut p, &format!("block{b}/skip"), co, ci, 1, false, rng);
        }
        let c = config.channels(config.blocks());
        conv(&mut p, "epilogue/conv", c, c, 3, true, rng);
        p.push("epilogue/fc/w", nn::he_normal(&[c, c * 16], c * 16, 1.0, rng));
        p.push("epilogue/fc/b", Tensor::zeros([c]));
        p.push("epilogue/out/w", nn::he_normal(&[1, c], c, 1.0, rng));
        p.push("epilogue/out/b", Tensor::zeros([1]));
        Ok(Discriminator { config: config.clone(), params: p })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Logits of a `[n, 3, s, s]` batch, without gradients.
    pub fn logits(&self, patches: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let params = self.params.bind(&tape, false);
        let out = self.forward(&params, tape.constant(patches.clone()))?;
        let v = out.value();
        Ok(v.data().to_vec())
    }
}

/// `x Wᵀ + b` for `x: [n, i]`, `w: [o, i]`, `b: [o]`.
pub fn dense<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
    let n = x.shape()[0];
    let o = w.shape()[0];
    x.matmul(w, false, true).add(b.channel_bcast(n, 1, 1).reshape([n, o]))
}

impl Critic for Discriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let s = self.config.patch_size;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(format!("discriminator expects [n, 3, {s}, {s}], got {shape:?}")));
        }
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list matches architecture");
        let conv = |x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>, pad: usize| {
            let y = x.conv2d(w, 1, pad);
            match b {
                Some(b) => y.add_channel_bias(b),
                None => y,
            }
        };
        let (w, b) = (next(), next());
        let mut h = conv(x, w, Some(b), 0).leaky_relu(LEAK);
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        for _ in 0..self.config.blocks() {
            let (w0, b0, w1, b1, ws) = (next(), next(), next(), next(), next());
            let main = conv(h, w0, Some(b0), 1).leaky_relu(LEAK);
            let main = conv(main, w1, Some(b1), 1).leaky_relu(LEAK).avg_pool2();
            let skip = conv(h.avg_pool2(), ws, None, 0);
            h = main.add(skip).scale(inv_sqrt2);
        }
        let (w, b) = (next(), next());
        h = conv(h, w, Some(b), 1).leaky_relu(LEAK);
        let n = shape[0];
        let c = h.shape()[1];
        let flat = h.reshape([n, c * 16]);
        let (fw, fb, ow, ob) = (next(), next(), next(), next());
        let hidden = dense(flat, fw, fb).leaky_relu(LEAK);
        Ok(dense(hidden, ow, ob).reshape([n]))
    }
}

/// `D(P) = Σ w·P + b`; its input gradient is `w` everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCritic {
    pub patch_size: usize,
    params: ParamSet,
}

impl LinearCritic {
    pub fn new(w: Tensor, bias: f64) -> Self {
        let s = w.shape()[2];
        let mut params = ParamSet::new();
        params.push("w", w);
        params.push("b", Tensor::scalar(bias));
        LinearCritic { patch_size: s, params }
    }
}

impl Critic for LinearCritic {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let w_shape = params[0].shape();
        if shape.len() != 4 || shape[1..] != w_shape[1..] {
            return Err(Error::shape(format!("linear critic expects [n, {:?}], got {shape:?}", &w_shape[1..])));
        }
        let n = shape[0];
        let k = shape[1] * shape[2] * shape[3];
        let flat = x.reshape([n, k]);
        let w = params[0].reshape([1, k]);
        Ok(dense(flat, w, params[1].reshape([1])).reshape([n]))
    }
}

/// Mean over the batch of `‖∂D/∂P‖²` at the given patches. Built with a
/// differentiable input gradient so the result can itself be
/// differentiated with respect to the critic parameters.
pub fn r1_penalty_var<'t, C: Critic + ?Sized>(critic: &C, params: &[Var<'t>], real: &Tensor) -> Result<Var<'t>> {
    let tape = params.first().map(|p| p.tape()).ok_or_else(|| Error::invalid("critic has no parameters"))?;
    let x = tape.leaf(real.clone(), true);
    let logits = critic.forward(params, x)?;
    let g = tape.grad(logits.sum(), &[x], true).remove(0);
    let n = real.shape()[0] as f64;
    Ok(g.square().sum().scale(1.0 / n))
}

pub fn r1_penalty<C: Critic + ?Sized>(critic: &C, real: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let params = critic.params().bind(&tape, false);
    Ok(r1_penalty_var(critic, &params, real)?.value().item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanLossTerms {
    pub loss_for_minimizer: f64,
    pub loss_for_discriminator: f64,
    pub r1_penalty: f64,
    pub real_logits: Vec<f64>,
    pub fake_logits: Vec<f64>,
}

/// `mean f(D(fake))` with the critic frozen: gradients reach `fake` only.
pub fn minimizer_loss_var<'t, C: Critic + ?Sized>(critic: &C, tape: &'t Tape, fake: Var<'t>) -> Result<Var<'t>> {
    let frozen = critic.params().bind(tape, false);
    Ok(f_logistic_var(critic.forward(&frozen, fake)?).mean())
}

/// Discriminator objective to descend, on detached fakes. Returns the loss
/// and the R1 term.
pub fn discriminator_loss_var<'t, C: Critic + ?Sized>(
    critic: &C,
    params: &[Var<'t>],
    fake: &Tensor,
    real: &Tensor,
    lambda_gp: f64,
) -> Result<(Var<'t>, Var<'t>, Vec<f64>, Vec<f64>)> {
    if fake.shape() != real.shape() {
        return Err(Error::shape(format!("fake batch {:?} vs real batch {:?}", fake.shape(), real.shape())));
    }
    if !(lambda_gp >= 0.0) {
        return Err(Error::invalid("lambda_gp must be non-negative"));
    }
    let tape = params.first().map(|p| p.tape()).ok_or_else(|| Error::invalid("critic has no parameters"))?;
    let d_fake = critic.forward(params, tape.constant(fake.clone()))?;
    let d_real = critic.forward(params, tape.constant(real.clone()))?;
    let objective = f_logistic_var(d_fake).mean().add(f_logistic_var(d_real.neg()).mean());
    let r1 = r1_penalty_var(critic, params, real)?;
    let loss = objective.sub(r1.scale(lambda_gp)).neg();
    let (fl, rl) = (d_fake.value().data().to_vec(), d_real.value().data().to_vec());
    Ok((loss, r1, rl, fl))
}

/// Values of both players' losses for one fake/real pairing.
pub fn gan_step_losses<C: Critic + ?Sized>(critic: &C, fake: &Tensor, real: &Tensor, lambda_gp: f64) -> Result<GanLossTerms> {
    let tape = Tape::new();
    let params = critic.params().bind(&tape, false);
    let (loss, r1, real_logits, fake_logits) = discriminator_loss_var(critic, &params, fake, real, lambda_gp)?;
    let minimizer = fake_logits.iter().map(|&x| f_logistic(x)).sum::<f64>() / fake_logits.len() as f64;
    Ok(GanLossTerms {
        loss_for_minimizer: minimizer,
        loss_for_discriminator: loss.value().item(),
        r1_penalty: r1.value().item(),
        real_logits,
        fake_logits,
    })
}

/// Gradient of the discriminator loss with respect to the critic
/// parameters, plus the loss terms.
pub fn discriminator_gradients<C: Critic + ?Sized>(
    critic: &C,
    fake: &Tensor,
    real: &Tensor,
    lambda_gp: f64,
) -> Result<(Vec<Tensor>, GanLossTerms)> {
    let tape = Tape::new();
    let params = critic.params().bind(&tape, true);
    let (loss, r1, real_logits, fake_logits) = discriminator_loss_var(critic, &params, fake, real, lambda_gp)?;
    let grads = tape.gradients(loss, &params);
    let minimizer = fake_logits.iter().map(|&x| f_logistic(x)).sum::<f64>() / fake_logits.len() as f64;
    let terms = GanLossTerms {
        loss_for_minimizer: minimizer,
        loss_for_discriminator: loss.value().item(),
        r1_penalty: r1.value().item(),
        real_logits,
        fake_logits,
    };
    Ok((grads, terms))
}
