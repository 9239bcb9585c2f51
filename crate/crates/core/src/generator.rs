//! Conditional multi-resolution image generator.
//!
//! The input image is reduced to a pyramid by repeated 2x bilinear
//! down-sampling. Synthesis runs coarse to fine; every level concatenates
//! the up-sampled features of the level below with a small convolutional
//! encoding of the matching pyramid level, then applies two modulated 3x3
//! convolutions, each followed by per-pixel feature normalization, scaled
//! noise, bias and a leaky activation. Each level adds a 1x1 RGB
//! contribution to an up-sampled running sum; the output is
//! `sigmoid(g * logit(input) + sum)` with a learned gain `g`.
//!
//! Everything is spatially local, so a crop of the input refines to the
//! same pixels as the full image away from a margin given by
//! [`GeneratorConfig::receptive_margin`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, ParamSet};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;
const CONVS_PER_LEVEL: usize = 2;
/// Input colors are clamped to `[EPS, 1 - EPS]` before the logit.
const EPS: f64 = 1e-4;
const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of resolutions; inputs must be divisible by `2^(levels-1)`.
    pub levels: usize,
    pub coarsest_channels: usize,
    pub min_channels: usize,
    pub encoder_channels: usize,
    pub noise_init: f64,
    pub rgb_gain: f64,
    /// Encode the input at every pyramid level; when false only the
    /// coarsest level sees it (besides the output skip).
    pub rgb_encoding: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            levels: 7,
            coarsest_channels: 256,
            min_channels: 32,
            encoder_channels: 32,
            noise_init: 0.1,
            rgb_gain: 0.1,
            rgb_encoding: true,
        }
    }
}

impl GeneratorConfig {
    /// Two levels with eight channels everywhere, for tests.
    pub fn miniature() -> Self {
        GeneratorConfig { levels: 2, coarsest_channels: 8, min_channels: 8, encoder_channels: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 12 {
            return Err(Error::invalid(format!("generator levels {} outside 1..=12", self.levels)));
        }
        if self.coarsest_channels == 0 || self.min_channels == 0 || self.encoder_channels == 0 {
            return Err(Error::invalid("generator channel counts must be positive"));
        }
        if !(self.noise_init.is_finite() && self.rgb_gain.is_finite()) {
            return Err(Error::invalid("generator init scales must be finite"));
        }
        Ok(())
    }

    /// Feature channels at level `k`, counted from the coarsest.
    pub fn channels(&self, k: usize) -> usize {
        (self.coarsest_channels >> k.min(63)).max(self.min_channels)
    }

    /// Required divisor of input height and width.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn encodes(&self, level: usize) -> bool {
        level == 0 || self.rgb_encoding
    }

    pub fn noise_layers(&self) -> usize {
        self.levels * CONVS_PER_LEVEL
    }

    /// Distance in output pixels from a crop edge within which a crop pass
    /// may differ from the full-image pass (crops aligned to
    /// [`GeneratorConfig::divisor`]). Zero-padded 3x3 convolutions widen
    /// the affected band by one pixel each; bilinear 2x up-sampling maps a
    /// band of `d` pixels to `2d + 1`.
    pub fn receptive_margin(&self) -> usize {
        let mut d = 1 + CONVS_PER_LEVEL;
        for _ in 1..self.levels {
            d = 2 * d + 1 + CONVS_PER_LEVEL;
        }
        d
    }
}

/// Source of the per-layer noise maps.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSpec {
    /// Standard normal maps drawn from streams of this seed.
    Sampled(u64),
    Zero,
    /// One `[n, 1, h_k, w_k]` map per noise layer, coarsest first.
    Provided(Vec<Tensor>),
}

/// 2x bilinear down-sampling repeated `levels - 1` times; level 0 is the
/// input. With pixel centers at half-integers this is a 2x2 box average.
pub fn build_condition_pyramid(patch: &Image, levels: usize) -> Result<Vec<Image>> {
    let (h, w) = (patch.height(), patch.width());
    check_divisible(h, w, levels)?;
    let tape = Tape::new();
    let mut cur = tape.constant(patch.to_tensor().reshape([1, 3, h, w]));
    let mut out = vec![patch.clone()];
    for _ in 1..levels {
        cur = cur.avg_pool2();
        out.push(Image::from_tensor(&cur.value(), 0)?);
    }
    Ok(out)
}

fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    if levels == 0 || levels > 12 {
        return Err(Error::invalid(format!("pyramid levels {levels} outside 1..=12")));
    }
    let m = 1usize << (levels - 1);
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!("{h}x{w} input is not divisible by {m}; pad to a multiple first")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
}

impl Generator {
    pub fn new(config: &GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let e = config.encoder_channels;
        for k in 0..config.levels {
            let c = config.channels(k);
            let enc = if config.encodes(k) { e } else { 0 };
            if enc > 0 {
                p.push(format!("level{k}/enc/w"), nn::he_normal(&[e, 3, 3, 3], 27, 1.0, rng));
                p.push(format!("level{k}/enc/b"), Tensor::zeros([e]));
            }
            let mut inp = if k == 0 { e } else { config.channels(k - 1) + enc };
            for j in 0..CONVS_PER_LEVEL {
                p.push(format!("level{k}/conv{j}/w"), nn::he_normal(&[c, inp, 3, 3], inp * 9, 1.0, rng));
                p.push(format!("level{k}/conv{j}/style"), Tensor::full([inp], 1.0));
                p.push(format!("level{k}/conv{j}/b"), Tensor::zeros([c]));
                p.push(format!("level{k}/conv{j}/noise"), Tensor::full([1], config.noise_init));
                inp = c;
            }
            p.push(format!("level{k}/to_rgb/w"), nn::he_normal(&[3, c, 1, 1], c, config.rgb_gain, rng));
            p.push(format!("level{k}/to_rgb/b"), Tensor::zeros([3]));
        }
        p.push("skip_gain", Tensor::full([1], 1.0));
        Ok(Generator { config: config.clone(), params: p })
    }

    /// Rebuild from stored parameters; names and shapes must match `config`.
    pub fn from_params(config: &GeneratorConfig, stored: &ParamSet) -> Result<Self> {
        let mut g = Generator::new(config, &mut rng::stream(0, "generator-shape", 0))?;
        g.params.load_from(stored)?;
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Indices of the conditioning path: pyramid encoders and the input skip gain.
    pub fn conditioning_indices(&self) -> Vec<usize> {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.contains("/enc/"))
            .map(|(i, _)| i)
            .collect()
    }

    /// Zero the per-level encoders. The features then ignore the input,
    /// which reaches the output only through the gain-scaled skip.
    pub fn zero_conditioning(&mut self) {
        for i in self.conditioning_indices() {
            self.params.get_mut(i).data_mut().fill(0.0);
        }
    }

    pub fn noise_scale_indices(&self) -> Vec<usize> {
        self.params.names().iter().enumerate().filter(|(_, n)| n.ends_with("/noise")).map(|(i, _)| i).collect()
    }

    /// Noise maps for an `[n, 3, h, w]` input, coarsest layer first.
    pub fn noise_maps(&self, n: usize, h: usize, w: usize, spec: &NoiseSpec) -> Result<Vec<Tensor>> {
        let cfg = &self.config;
        let shape = |layer: usize| {
            let f = cfg.divisor() >> (layer / CONVS_PER_LEVEL);
            [n, 1, h / f, w / f]
        };
        match spec {
            NoiseSpec::Zero => Ok((0..cfg.noise_layers()).map(|l| Tensor::zeros(shape(l))).collect()),
            NoiseSpec::Sampled(seed) => Ok((0..cfg.noise_layers())
                .map(|l| {
                    let s = shape(l);
                    let mut r = rng::stream(*seed, "generator-noise", l as u64);
                    nn::normal(&s, 1.0, &mut r)
                })
                .collect()),
            NoiseSpec::Provided(maps) => {
                if maps.len() != cfg.noise_layers() {
                    return Err(Error::shape(format!("{} noise maps given, {} layers", maps.len(), cfg.noise_layers())));
                }
                for (l, m) in maps.iter().enumerate() {
                    if m.shape() != shape(l) {
                        return Err(Error::shape(format!("noise map {l} is {:?}, expected {:?}", m.shape(), shape(l))));
                    }
                }
                Ok(maps.clone())
            }
        }
    }

    /// Refine an `[n, 3, h, w]` batch on the tape. `params` are the tape
    /// bindings of [`Generator::params`], in order.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>, noise: &NoiseSpec) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!("generator expects [n, 3, h, w], got {shape:?}")));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape("generator parameter bindings do not match"));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let cfg = &self.config;
        check_divisible(h, w, cfg.levels)?;
        let maps = self.noise_maps(n, h, w, noise)?;
        let tape = x.tape();

        let mut pyramid = vec![x];
        for _ in 1..cfg.levels {
            let next = pyramid.last().expect("non-empty").avg_pool2();
            pyramid.push(next);
        }
        pyramid.reverse();

        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list matches architecture");
        let mut feat: Option<Var<'t>> = None;
        let mut rgb: Option<Var<'t>> = None;
        for (k, level_in) in pyramid.iter().enumerate() {
            let enc = cfg.encodes(k).then(|| {
                let (ew, eb) = (next(), next());
                level_in.conv2d(ew, 1, 1).add_channel_bias(eb).leaky_relu(LEAK)
            });
            let mut hcur = match (feat, enc) {
                (Some(f), Some(e)) => Var::concat_channels(&[f.up2(), e]),
                (Some(f), None) => f.up2(),
                (None, Some(e)) => e,
                (None, None) => unreachable!("the coarsest level always encodes"),
            };
            for j in 0..CONVS_PER_LEVEL {
                let (cw, style, b, ns) = (next(), next(), next(), next());
                let c = cw.shape()[0];
                let y = pixel_norm(hcur.conv2d(modulate(cw, style), 1, 1));
                let map = tape.constant(maps[k * CONVS_PER_LEVEL + j].clone());
                let injected = map.conv2d(ns.reshape([1]).expand([c, 1, 1, 1]), 1, 0);
                hcur = y.add(injected).add_channel_bias(b).leaky_relu(LEAK);
            }
            let (rw, rb) = (next(), next());
            let contrib = hcur.conv2d(rw, 1, 0).add_channel_bias(rb);
            rgb = Some(match rgb {
                Some(r) => r.up2().add(contrib),
                None => contrib,
            });
            feat = Some(hcur);
        }
        let gain = next();
        let xc = x.clamp(EPS, 1.0 - EPS);
        let logit = xc.ln().sub(xc.neg().add_scalar(1.0).ln());
        let out = gain.reshape([1]).expand(shape.clone()).mul(logit).add(rgb.expect("at least one level"));
        Ok(out.sigmoid())
    }

    /// Refine an `[n, 3, h, w]` batch without recording gradients.
    pub fn forward_tensor(&self, x: &Tensor, noise: &NoiseSpec) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.params.bind(&tape, false);
        let out = self.forward(&params, tape.constant(x.clone()), noise)?;
        let v = out.value();
        Ok((*v).clone())
    }

    /// Refine one patch.
    pub fn generator_forward(&self, patch: &Image, noise: &NoiseSpec) -> Result<Image> {
        let (h, w) = (patch.height(), patch.width());
        let out = self.forward_tensor(&patch.to_tensor().reshape([1, 3, h, w]), noise)?;
        Image::from_tensor(&out, 0)
    }

    /// Refine a whole image in one fully convolutional pass. Height and
    /// width must be divisible by [`GeneratorConfig::divisor`]; see
    /// [`Generator::refine_padded`] for other sizes.
    pub fn refine_image(&self, image: &Image, noise: &NoiseSpec) -> Result<Image> {
        self.generator_forward(image, noise)
    }

    /// Pad by edge replication on the bottom and right to the next multiple
    /// of the divisor, refine, then crop back to the original size.
    pub fn refine_padded(&self, image: &Image, noise: &NoiseSpec) -> Result<Image> {
        let m = self.config.divisor();
        let (h, w) = (image.height(), image.width());
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph, pw) == (h, w) {
            return self.refine_image(image, noise);
        }
        let padded = Image::from_fn(pw, ph, |r, c| image.pixel(r.min(h - 1), c.min(w - 1)));
        self.refine_image(&padded, noise)?.crop(0, 0, h, w)
    }
}

/// Weight demodulation with a learned per-input-channel style: scale input
/// channels of `w: [o, i, k, k]` by `style: [i]`, then normalize each
/// output filter to unit L2 norm.
fn modulate<'t>(w: Var<'t>, style: Var<'t>) -> Var<'t> {
    let s = w.shape();
    let (o, i, k) = (s[0], s[1], s[2]);
    let w1 = w.mul(style.channel_bcast(o, k, k));
    let taps = i * k * k;
    let inv = w1.square().reshape([o, 1, 1, taps]).spatial_mean().scale(taps as f64).add_scalar(NORM_EPS).powf(-0.5);
    w1.mul(inv.spatial_bcast(1, taps).reshape([o, i, k, k]))
}

/// Normalize each pixel's feature vector to unit mean square across channels.
fn pixel_norm<'t>(y: Var<'t>) -> Var<'t> {
    let c = y.shape()[1];
    let tape = y.tape();
    let sum = tape.constant(Tensor::full([1, c, 1, 1], 1.0 / c as f64));
    let spread = tape.constant(Tensor::full([c, 1, 1, 1], 1.0));
    let inv = y.square().conv2d(sum, 1, 0).add_scalar(NORM_EPS).powf(-0.5);
    y.mul(inv.conv2d(spread, 1, 0))
}
