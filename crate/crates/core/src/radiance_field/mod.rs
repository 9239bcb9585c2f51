//! Learnable radiance field and its differentiable volume renderer.
//!
//! Rendering discretizes each ray into `N` bins between `near` and `far`,
//! queries the field at one point per bin and alpha-composites front to
//! back over a constant background color. Gradients flow back by hand:
//! the compositing adjoint yields per-sample density and color gradients,
//! which the field turns into parameter gradients.

mod field;

pub use field::{
    encode, encoded_len, Backbone, Field, FieldCache, FieldConfig, FieldEval, FieldModel, GridField, MlpField,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};
use crate::scene_io::{generate_ray, CameraIntrinsics, CameraPose, Ray};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub samples_per_ray: usize,
    /// Jitter samples uniformly inside their bins instead of using midpoints.
    pub stratified: bool,
    pub background: [f64; 3],
}

impl RenderConfig {
    pub fn new(near: f64, far: f64, samples_per_ray: usize) -> Result<Self> {
        let c = RenderConfig { near, far, samples_per_ray, stratified: false, background: [0.5; 3] };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near >= 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::invalid("render bounds need 0 <= near < far"));
        }
        if self.samples_per_ray == 0 {
            return Err(Error::invalid("samples_per_ray must be positive"));
        }
        if !self.background.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("background color outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// `Σ wᵢ tᵢ` over the sample positions (not normalized by opacity).
    pub depth: f64,
    pub weights: Vec<f64>,
    pub opacity: f64,
}

/// Sample positions and quadrature lengths along a ray.
pub fn sample_along_ray(config: &RenderConfig, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let n = config.samples_per_ray;
    let bin = (config.far - config.near) / n as f64;
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let lo = config.near + i as f64 * bin;
            let off = if config.stratified { rng.gen::<f64>() } else { 0.5 };
            // rounding can land exactly on the next bin edge
            (lo + off * bin).min(lo + bin * (1.0 - 1e-12))
        })
        .collect();
    let mut deltas: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(config.far - t[n - 1]);
    (t, deltas)
}

/// Front-to-back alpha compositing of one ray.
pub fn composite(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    t_values: &[f64],
    background: [f64; 3],
) -> Result<RenderOutput> {
    let n = sigmas.len();
    if n == 0 || colors.len() != n || deltas.len() != n || t_values.len() != n {
        return Err(Error::shape("compositing inputs need equal non-zero lengths"));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) || deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("densities must be >= 0 and deltas > 0"));
    }
    Ok(composite_unchecked(sigmas, colors, deltas, t_values, background))
}

fn composite_unchecked(sigmas: &[f64], colors: &[[f64; 3]], deltas: &[f64], t_values: &[f64], background: [f64; 3]) -> RenderOutput {
    let mut optical = 0.0f64;
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for i in 0..sigmas.len() {
        let t_i = (-optical).exp();
        optical += sigmas[i] * deltas[i];
        // wᵢ = Tᵢ - Tᵢ₊₁, which makes Σ w telescope to 1 - T_{N+1}
        let w = t_i - (-optical).exp();
        weights.push(w);
        for k in 0..3 {
            color[k] += w * colors[i][k];
        }
        depth += w * t_values[i];
    }
    let t_end = (-optical).exp();
    for k in 0..3 {
        color[k] += t_end * background[k];
    }
    RenderOutput { color, depth, opacity: 1.0 - t_end, weights }
}

/// Adjoint of [`composite`]: per-sample `dL/dσ` and `dL/dc` for upstream
/// color and depth gradients.
fn composite_backward(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    t_values: &[f64],
    background: [f64; 3],
    out: &RenderOutput,
    d_color: [f64; 3],
    d_depth: f64,
    d_sigma: &mut [f64],
    d_rgb: &mut [[f64; 3]],
) {
    let n = sigmas.len();
    let t_end = 1.0 - out.opacity;
    // ∂C/∂τₖ = Tₖ₊₁cₖ − Σ_{i>k} wᵢcᵢ − T_{N+1}·bg, with τ = σδ
    let mut suffix_c = [0.0; 3];
    let mut suffix_d = 0.0;
    let mut optical: f64 = sigmas.iter().zip(deltas).map(|(s, d)| s * d).sum();
    for k in (0..n).rev() {
        let t_next = (-optical).exp();
        optical -= sigmas[k] * deltas[k];
        let mut g = 0.0;
        for c in 0..3 {
            let dc = t_next * colors[k][c] - suffix_c[c] - t_end * background[c];
            g += d_color[c] * dc;
        }
        g += d_depth * (t_next * t_values[k] - suffix_d);
        d_sigma[k] = g * deltas[k];
        let w = out.weights[k];
        d_rgb[k] = [w * d_color[0], w * d_color[1], w * d_color[2]];
        for c in 0..3 {
            suffix_c[c] += w * colors[k][c];
        }
        suffix_d += w * t_values[k];
    }
}

/// Random stream for the samples of ray `index` under `seed`.
pub fn ray_rng(seed: u64, index: u64) -> Rng {
    rng::stream(seed, "ray-samples", index)
}

/// Rays evaluated per field batch.
const CHUNK: usize = 64;

struct ChunkSamples {
    t: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    xs: Vec<[f64; 3]>,
    ds: Vec<[f64; 3]>,
}

fn chunk_samples(rays: &[Ray], first_index: u64, seed: u64, config: &RenderConfig) -> ChunkSamples {
    let n = config.samples_per_ray;
    let mut s = ChunkSamples {
        t: Vec::with_capacity(rays.len()),
        deltas: Vec::with_capacity(rays.len()),
        xs: Vec::with_capacity(rays.len() * n),
        ds: Vec::with_capacity(rays.len() * n),
    };
    for (j, ray) in rays.iter().enumerate() {
        let (t, d) = if config.stratified {
            sample_along_ray(config, &mut ray_rng(seed, first_index + j as u64))
        } else {
            // midpoints consume no randomness; skip deriving a stream
            sample_along_ray(config, &mut ray_rng(0, 0))
        };
        for &ti in &t {
            s.xs.push(ray.at(ti));
            s.ds.push(ray.direction);
        }
        s.t.push(t);
        s.deltas.push(d);
    }
    s
}

/// Render rays; ray `i` draws its samples from `ray_rng(seed, i)`, so the
/// result is independent of batching.
pub fn render_rays<F: FieldModel>(field: &F, rays: &[Ray], config: &RenderConfig, seed: u64) -> Vec<RenderOutput> {
    render_rays_from(field, rays, config, seed, 0)
}

/// As [`render_rays`], numbering rays from `first_index`.
pub fn render_rays_from<F: FieldModel>(
    field: &F,
    rays: &[Ray],
    config: &RenderConfig,
    seed: u64,
    first_index: u64,
) -> Vec<RenderOutput> {
    let n = config.samples_per_ray;
    let mut out = Vec::with_capacity(rays.len());
    for (c, chunk) in rays.chunks(CHUNK).enumerate() {
        let s = chunk_samples(chunk, first_index + (c * CHUNK) as u64, seed, config);
        let e = field.forward(&s.xs, &s.ds);
        for j in 0..chunk.len() {
            let r = j * n..(j + 1) * n;
            out.push(composite_unchecked(&e.sigma[r.clone()], &e.rgb[r], &s.deltas[j], &s.t[j], config.background));
        }
    }
    out
}

/// Render rays and backpropagate a per-ray loss in one pass. `loss_grad`
/// maps ray index and its output to `(dL/dcolor, dL/ddepth)`; parameter
/// gradients accumulate into `grads`.
pub fn render_rays_backward<F: FieldModel>(
    field: &F,
    rays: &[Ray],
    config: &RenderConfig,
    seed: u64,
    mut loss_grad: impl FnMut(usize, &RenderOutput) -> ([f64; 3], f64),
    grads: &mut [Tensor],
) -> Vec<RenderOutput> {
    let n = config.samples_per_ray;
    let mut out = Vec::with_capacity(rays.len());
    for (c, chunk) in rays.chunks(CHUNK).enumerate() {
        let s = chunk_samples(chunk, (c * CHUNK) as u64, seed, config);
        let e = field.forward(&s.xs, &s.ds);
        let mut d_sigma = vec![0.0; chunk.len() * n];
        let mut d_rgb = vec![[0.0; 3]; chunk.len() * n];
        for j in 0..chunk.len() {
            let r = j * n..(j + 1) * n;
            let o = composite_unchecked(&e.sigma[r.clone()], &e.rgb[r.clone()], &s.deltas[j], &s.t[j], config.background);
            let (dc, dd) = loss_grad(c * CHUNK + j, &o);
            composite_backward(
                &e.sigma[r.clone()],
                &e.rgb[r.clone()],
                &s.deltas[j],
                &s.t[j],
                config.background,
                &o,
                dc,
                dd,
                &mut d_sigma[r.clone()],
                &mut d_rgb[r],
            );
            out.push(o);
        }
        field.backward(&e.cache, &d_sigma, &d_rgb, grads);
    }
    out
}

pub fn render_ray<F: FieldModel>(field: &F, ray: &Ray, config: &RenderConfig, seed: u64) -> RenderOutput {
    render_rays(field, std::slice::from_ref(ray), config, seed).remove(0)
}

/// Render a row-major `size x size` grid of rays into an image.
pub fn render_patch<F: FieldModel>(field: &F, rays: &[Ray], size: usize, config: &RenderConfig, seed: u64) -> Result<Image> {
    if size == 0 || rays.len() != size * size {
        return Err(Error::shape(format!("{} rays for a {size}x{size} patch", rays.len())));
    }
    let out = render_rays(field, rays, config, seed);
    Image::new(size, size, out.iter().flat_map(|o| o.color).collect())
}

/// Full frame, rendered in chunks of `chunk` rows; ray index is the pixel
/// index so chunking never changes the result.
pub fn render_image<F: FieldModel>(
    field: &F,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    config: &RenderConfig,
    seed: u64,
    chunk: usize,
) -> Result<(Image, Vec<f64>)> {
    config.validate()?;
    let (w, h) = (intrinsics.width, intrinsics.height);
    let chunk = chunk.max(1);
    let mut colors = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut start = 0;
    while start < w * h {
        let end = (start + chunk).min(w * h);
        let rays: Vec<Ray> = (start..end)
            .map(|p| generate_ray(intrinsics, pose, ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5)))
            .collect::<Result<_>>()?;
        for o in render_rays_from(field, &rays, config, seed, start as u64) {
            colors.extend_from_slice(&o.color);
            depth.push(o.depth);
        }
        start = end;
    }
    Ok((Image::new(w, h, colors)?, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{self, Vec3};
    use crate::nn::ParamSet;
    use proptest::prelude::*;

    /// Constant density and color between two planes `z = lo` and `z = hi`.
    struct Slab {
        lo: f64,
        hi: f64,
        sigma: f64,
        color: [f64; 3],
        params: ParamSet,
    }

    impl FieldModel for Slab {
        type Cache = ();
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn forward(&self, xs: &[Vec3], _: &[Vec3]) -> FieldEval<()> {
            FieldEval {
                sigma: xs.iter().map(|x| if x[2] >= self.lo && x[2] < self.hi { self.sigma } else { 0.0 }).collect(),
                rgb: vec![self.color; xs.len()],
                cache: (),
            }
        }
        fn backward(&self, _: &(), _: &[f64], _: &[[f64; 3]], _: &mut [Tensor]) {}
    }

    fn z_ray() -> Ray {
        Ray { origin: [0.0; 3], direction: [0.0, 0.0, 1.0] }
    }

    #[test]
    fn midpoint_samples() {
        let cfg = RenderConfig::new(0.0, 4.0, 4).unwrap();
        let (t, d) = sample_along_ray(&cfg, &mut rng::stream(0, "s", 0));
        assert_eq!(t, vec![0.5, 1.5, 2.5, 3.5]);
        assert_eq!(d, vec![1.0, 1.0, 1.0, 0.5]);
        let one = RenderConfig::new(1.0, 3.0, 1).unwrap();
        assert_eq!(sample_along_ray(&one, &mut rng::stream(0, "s", 0)), (vec![2.0], vec![1.0]));
    }

    #[test]
    fn stratified_samples_stay_in_bins() {
        let cfg = RenderConfig { stratified: true, ..RenderConfig::new(0.5, 3.0, 16).unwrap() };
        let mut r = rng::stream(0, "s", 0);
        for _ in 0..200 {
            let (t, d) = sample_along_ray(&cfg, &mut r);
            let bin = 2.5 / 16.0;
            for (i, ti) in t.iter().enumerate() {
                assert!(*ti >= 0.5 + i as f64 * bin && *ti < 0.5 + (i + 1) as f64 * bin);
            }
            assert!(d.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn empty_ray_is_background() {
        let o = composite(&[0.0; 5], &[[1.0, 0.0, 0.0]; 5], &[0.2; 5], &[0.1; 5], [0.2, 0.3, 0.4]).unwrap();
        assert_eq!(o.weights, vec![0.0; 5]);
        assert_eq!(o.opacity, 0.0);
        assert_eq!(o.color, [0.2, 0.3, 0.4]);
    }

    #[test]
    fn opaque_first_sample_saturates() {
        let o = composite(&[50.0, 3.0], &[[0.1, 0.2, 0.3], [1.0; 3]], &[1.0, 1.0], &[0.5, 1.5], [0.0; 3]).unwrap();
        assert!((o.weights[0] - 1.0).abs() < 1e-9);
        for k in 0..3 {
            assert!((o.color[k] - [0.1, 0.2, 0.3][k]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_compositing_inputs() {
        assert!(composite(&[-1.0], &[[0.0; 3]], &[1.0], &[0.5], [0.0; 3]).is_err());
        assert!(composite(&[1.0], &[[0.0; 3]], &[0.0], &[0.5], [0.0; 3]).is_err());
        assert!(composite(&[], &[], &[], &[], [0.0; 3]).is_err());
        assert!(composite(&[1.0, 1.0], &[[0.0; 3]], &[1.0], &[0.5], [0.0; 3]).is_err());
    }

    #[test]
    fn constant_density_matches_exp_integral() {
        let slab = Slab { lo: -1.0, hi: 10.0, sigma: 1.0, color: [1.0, 0.0, 0.0], params: ParamSet::new() };
        let cfg = RenderConfig { background: [0.0; 3], ..RenderConfig::new(0.0, 2.0, 1024).unwrap() };
        let o = render_ray(&slab, &z_ray(), &cfg, 0);
        let exact = 1.0 - (-2.0f64).exp();
        assert!((o.opacity - exact).abs() < 1e-3);
        assert!((o.color[0] - exact).abs() < 1e-3);
    }

    #[test]
    fn piecewise_constant_density_is_exact() {
        // segments [0,1) σ=0.5, [1,2.5) σ=2, [2.5,3) σ=0: sampling at the
        // segment starts with exact segment lengths reproduces the integral
        let sig = [0.5, 2.0, 0.0];
        let del = [1.0, 1.5, 0.5];
        let col = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let o = composite(&sig, &col, &del, &[0.0, 1.0, 2.5], [0.3; 3]).unwrap();
        let t1 = (-0.5f64).exp();
        let t2 = t1 * (-3.0f64).exp();
        let expect = [1.0 - t1, t1 - t2, 0.3 * t2];
        for k in 0..3 {
            assert!((o.color[k] - (expect[k] + if k < 2 { 0.3 * t2 } else { 0.0 })).abs() < 1e-12);
        }
        assert!((o.opacity - (1.0 - t2)).abs() < 1e-12);
    }

    #[test]
    fn slab_patch_matches_analytic_value() {
        let slab = Slab { lo: 1.0, hi: 2.0, sigma: 0.8, color: [0.9, 0.1, 0.4], params: ParamSet::new() };
        let cfg = RenderConfig { background: [0.0; 3], ..RenderConfig::new(0.0, 4.0, 1024).unwrap() };
        let rays = vec![z_ray(); 256];
        let img = render_patch(&slab, &rays, 16, &cfg, 0).unwrap();
        let a = 1.0 - (-0.8f64).exp();
        for r in 0..16 {
            for c in 0..16 {
                let p = img.pixel(r, c);
                for k in 0..3 {
                    assert!((p[k] - a * slab.color[k]).abs() < 1e-6);
                }
            }
        }
    }

    fn tiny_field(seed: u64) -> Field {
        let cfg = FieldConfig {
            backbone: Backbone::Mlp { pos_freqs: 3, dir_freqs: 1, width: 16, depth: 2, color_width: 8 },
            ..FieldConfig::default()
        };
        Field::new(&cfg, &mut rng::stream(seed, "field", 0)).unwrap()
    }

    fn random_rays(n: usize, seed: u64) -> Vec<Ray> {
        let mut r = rng::stream(seed, "rays", 0);
        (0..n)
            .map(|_| Ray {
                origin: [r.gen_range(-1.0..1.0), r.gen_range(-0.5..0.5), r.gen_range(-1.0..1.0)],
                direction: geometry::normalize([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]),
            })
            .collect()
    }

    #[test]
    fn zero_density_field_renders_background() {
        let mut f = tiny_field(1);
        f.set_zero_density();
        let cfg = RenderConfig { background: [0.25, 0.5, 0.75], ..RenderConfig::new(0.05, 6.0, 32).unwrap() };
        for o in render_rays(&f, &random_rays(50, 2), &cfg, 0) {
            assert_eq!(o.color, [0.25, 0.5, 0.75]);
        }
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        for mut f in [tiny_field(3), Field::new(&FieldConfig::grid(5, 2), &mut rng::stream(3, "g", 0)).unwrap()] {
            let rays = random_rays(20, 4);
            let cfg = RenderConfig { stratified: true, ..RenderConfig::new(0.05, 3.0, 12).unwrap() };
            let targets: Vec<[f64; 3]> = (0..20).map(|i| [0.1 * (i % 7) as f64, 0.5, 0.9 - 0.04 * i as f64]).collect();
            let loss = |f: &Field| {
                render_rays(f, &rays, &cfg, 9)
                    .iter()
                    .zip(&targets)
                    .map(|(o, t)| (0..3).map(|k| (o.color[k] - t[k]).powi(2)).sum::<f64>() + 0.1 * o.depth)
                    .sum::<f64>()
            };
            let mut grads = f.params().zeros_like();
            render_rays_backward(
                &f,
                &rays,
                &cfg,
                9,
                |i, o| ([0, 1, 2].map(|k| 2.0 * (o.color[k] - targets[i][k])), 0.1),
                &mut grads,
            );
            // probe entries the rays actually reach
            let touched: Vec<(usize, usize)> = (0..f.params().len())
                .flat_map(|p| (0..grads[p].numel()).map(move |j| (p, j)))
                .filter(|&(p, j)| grads[p].data()[j].abs() > 1e-7)
                .collect();
            let mut checked = 0;
            for &(p, j) in touched.iter().step_by((touched.len() / 40).max(1)) {
                let orig = f.params().get(p).data()[j];
                let h = 1e-6;
                f.params_mut().get_mut(p).data_mut()[j] = orig + h;
                let lp = loss(&f);
                f.params_mut().get_mut(p).data_mut()[j] = orig - h;
                let lm = loss(&f);
                f.params_mut().get_mut(p).data_mut()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[p].data()[j];
                assert!((fd - an).abs() / fd.abs().max(an.abs()) < 1e-3, "param {p}[{j}]: fd {fd} vs {an}");
                checked += 1;
            }
            assert!(checked >= 20, "only {checked} informative probes");
        }
    }

    #[test]
    fn chunking_and_order_do_not_change_results() {
        let f = tiny_field(5);
        let k = CameraIntrinsics::centered(10.0, 9, 7).unwrap();
        let pose = CameraPose::look_at([1.5, 0.2, 0.3], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
        let cfg = RenderConfig { stratified: true, ..RenderConfig::new(0.05, 4.0, 8).unwrap() };
        let (a, da) = render_image(&f, &k, &pose, &cfg, 3, 1).unwrap();
        let (b, db) = render_image(&f, &k, &pose, &cfg, 3, 1000).unwrap();
        assert_eq!(a, b);
        assert_eq!(da, db);
        let (c, _) = render_image(&f, &k, &pose, &cfg, 3, 17).unwrap();
        assert_eq!(a, c);

        let rays = random_rays(5, 6);
        let single = render_patch(&f, &rays[..1], 1, &RenderConfig::new(0.05, 4.0, 8).unwrap(), 0).unwrap();
        let o = render_ray(&f, &rays[0], &RenderConfig::new(0.05, 4.0, 8).unwrap(), 0);
        assert_eq!(single.pixel(0, 0), o.color);
        let mid = RenderConfig::new(0.05, 4.0, 8).unwrap();
        let fwd = render_rays(&f, &rays, &mid, 0);
        let rev: Vec<Ray> = rays.iter().rev().copied().collect();
        let mut back = render_rays(&f, &rev, &mid, 0);
        back.reverse();
        assert_eq!(fwd, back);
    }

    #[test]
    fn doubling_samples_reduces_error_on_average() {
        let f = tiny_field(7);
        let rays = random_rays(100, 8);
        let reference = render_rays(&f, &rays, &RenderConfig::new(0.05, 3.0, 2048).unwrap(), 0);
        let mut prev = f64::INFINITY;
        for n in [8, 16, 32, 64] {
            let out = render_rays(&f, &rays, &RenderConfig::new(0.05, 3.0, n).unwrap(), 0);
            let err: f64 = out
                .iter()
                .zip(&reference)
                .map(|(a, b)| (0..3).map(|k| (a.color[k] - b.color[k]).abs()).sum::<f64>())
                .sum::<f64>()
                / 100.0;
            assert!(err < prev, "error {err} at N={n} did not drop below {prev}");
            prev = err;
        }
    }

    proptest! {
        #[test]
        fn compositing_weights_telescope(
            sig in prop::collection::vec(0.0f64..20.0, 1..40),
            seed in 0u64..1000,
        ) {
            let n = sig.len();
            let mut r = rng::stream(seed, "d", 0);
            let del: Vec<f64> = (0..n).map(|_| r.gen_range(1e-3..1.0)).collect();
            let col: Vec<[f64; 3]> = (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
            let t: Vec<f64> = del.iter().scan(0.0, |acc, d| { *acc += d; Some(*acc) }).collect();
            let o = composite(&sig, &col, &del, &t, [0.5; 3]).unwrap();
            let total: f64 = sig.iter().zip(&del).map(|(s, d)| s * d).sum();
            let sum_w: f64 = o.weights.iter().sum();
            prop_assert!(o.weights.iter().all(|w| *w >= 0.0));
            prop_assert!(sum_w <= 1.0 + 1e-5);
            prop_assert!((sum_w - (1.0 - (-total).exp())).abs() < 1e-9);
            prop_assert!(o.color.iter().all(|c| (0.0..=1.0 + 1e-12).contains(c)));
        }

        #[test]
        fn generated_rays_are_unit_length(row in 0.0f64..47.99, col in 0.0f64..63.99, ax in -1.0f64..1.0, ang in -3.0f64..3.0) {
            let k = CameraIntrinsics::centered(40.0, 64, 48).unwrap();
            let pose = CameraPose::new(geometry::axis_angle([ax, 1.0, 0.3], ang), [0.3, -1.0, 2.0]).unwrap();
            let r = generate_ray(&k, &pose, (row, col)).unwrap();
            prop_assert!((geometry::norm(r.direction) - 1.0).abs() < 1e-6);
            prop_assert_eq!(r.origin, pose.translation);
        }
    }
}
