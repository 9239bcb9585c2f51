//! Field backbones: sinusoidal-encoding MLP and dense feature grid.
//!
//! Both are differentiated by hand; the renderer pushes per-sample density
//! and color gradients back through [`FieldModel::backward`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::{self, ParamSet};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// Axis-aligned region the position encoding is normalized to.
    pub aabb_min: Vec3,
    pub aabb_max: Vec3,
    /// Constant added to the raw density before the softplus.
    pub density_shift: f64,
    pub backbone: Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backbone {
    Mlp {
        /// Frequencies of the position encoding.
        pos_freqs: usize,
        /// Frequencies of the direction encoding.
        dir_freqs: usize,
        width: usize,
        /// Hidden layers before the density/feature output layer.
        depth: usize,
        color_width: usize,
    },
    Grid {
        /// Vertices per axis.
        resolution: usize,
        /// Appearance features per vertex, besides density.
        features: usize,
        dir_freqs: usize,
    },
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            aabb_min: [-2.05, -1.05, -2.05],
            aabb_max: [2.05, 1.3, 2.05],
            density_shift: -1.0,
            backbone: Backbone::Mlp { pos_freqs: 8, dir_freqs: 2, width: 64, depth: 2, color_width: 32 },
        }
    }
}

impl FieldConfig {
    pub fn grid(resolution: usize, features: usize) -> Self {
        FieldConfig { backbone: Backbone::Grid { resolution, features, dir_freqs: 2 }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0..3).all(|a| self.aabb_min[a] < self.aabb_max[a]) {
            return Err(Error::invalid("field aabb must have positive extent"));
        }
        match self.backbone {
            Backbone::Mlp { width, depth, color_width, .. } if width == 0 || depth == 0 || color_width == 0 => {
                Err(Error::invalid("mlp widths and depth must be positive"))
            }
            Backbone::Grid { resolution, .. } if resolution < 2 => Err(Error::invalid("grid needs >= 2 vertices per axis")),
            _ => Ok(()),
        }
    }

    fn normalize(&self, x: Vec3) -> Vec3 {
        let mut u = [0.0; 3];
        for a in 0..3 {
            u[a] = 2.0 * (x[a] - self.aabb_min[a]) / (self.aabb_max[a] - self.aabb_min[a]) - 1.0;
        }
        u
    }
}

/// Sinusoidal encoding `[v, sin(2^k π v), cos(2^k π v)]` per component.
pub fn encode(v: Vec3, freqs: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&v);
    for k in 0..freqs {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for &c in &v {
            out.push((f * c).sin());
        }
        for &c in &v {
            out.push((f * c).cos());
        }
    }
}

pub fn encoded_len(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// Per-point density and color of a batch, plus whatever the backward
/// pass needs.
pub struct FieldEval<C> {
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    pub cache: C,
}

/// A learnable radiance field evaluated on batches of points.
pub trait FieldModel {
    type Cache;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward(&self, xs: &[Vec3], ds: &[Vec3]) -> FieldEval<Self::Cache>;
    /// Accumulate parameter gradients for upstream `d_sigma`, `d_rgb`.
    fn backward(&self, cache: &Self::Cache, d_sigma: &[f64], d_rgb: &[[f64; 3]], grads: &mut [Tensor]);
}

/// Fully connected layer `y = x Wᵀ + b` over row-major batches.
struct DenseRef<'a> {
    w: &'a Tensor,
    b: &'a Tensor,
}

impl DenseRef<'_> {
    fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let mut y = vec![0.0; rows * o];
        for r in 0..rows {
            y[r * o..(r + 1) * o].copy_from_slice(self.b.data());
        }
        gemm(rows, i, o, x, false, self.w.data(), true, &mut y, true);
        y
    }

    /// Accumulate `dW`, `db`; return `dx` when asked.
    fn backward(&self, x: &[f64], dy: &[f64], rows: usize, dw: &mut Tensor, db: &mut Tensor, want_dx: bool) -> Option<Vec<f64>> {
        let (o, i) = (self.out_dim(), self.in_dim());
        gemm(o, rows, i, dy, true, x, false, dw.data_mut(), true);
        let db = db.data_mut();
        for r in 0..rows {
            for k in 0..o {
                db[k] += dy[r * o + k];
            }
        }
        want_dx.then(|| {
            let mut dx = vec![0.0; rows * i];
            gemm(rows, o, i, dy, false, self.w.data(), false, &mut dx, false);
            dx
        })
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zero gradient entries where the post-relu activation is zero.
fn relu_mask(dy: &mut [f64], act: &[f64]) {
    for (g, a) in dy.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpField {
    config: FieldConfig,
    params: ParamSet,
    pos_freqs: usize,
    dir_freqs: usize,
    depth: usize,
}

pub struct MlpCache {
    rows: usize,
    /// Inputs to each trunk layer, then to the output layer.
    trunk_inputs: Vec<Vec<f64>>,
    pre_sigma: Vec<f64>,
    color_in: Vec<f64>,
    color_hidden: Vec<f64>,
    rgb: Vec<[f64; 3]>,
}

impl MlpField {
    pub fn new(config: &FieldConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let Backbone::Mlp { pos_freqs, dir_freqs, width, depth, color_width } = config.backbone else {
            return Err(Error::invalid("MlpField needs an mlp backbone"));
        };
        let mut params = ParamSet::new();
        let mut add = |name: &str, out: usize, inp: usize, gain: f64| {
            params.push(format!("{name}/w"), nn::he_normal(&[out, inp], inp, gain, rng));
            params.push(format!("{name}/b"), Tensor::zeros([out]));
        };
        let mut inp = encoded_len(pos_freqs);
        for l in 0..depth {
            add(&format!("trunk{l}"), width, inp, 1.0);
            inp = width;
        }
        add("out", width + 1, width, 0.5);
        add("color0", color_width, width + encoded_len(dir_freqs), 1.0);
        add("color1", 3, color_width, 0.5);
        Ok(MlpField { config: config.clone(), params, pos_freqs, dir_freqs, depth })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    fn layer(&self, idx: usize) -> DenseRef<'_> {
        DenseRef { w: self.params.get(2 * idx), b: self.params.get(2 * idx + 1) }
    }

    /// Layer index of the first color layer.
    fn color_layer(&self) -> usize {
        self.depth + 1
    }

    /// Force zero density everywhere (pushes the softplus deep into its
    /// flat region).
    pub fn set_zero_density(&mut self) {
        let out_b = 2 * self.depth + 1;
        let w = 2 * self.depth;
        let width = self.params.get(w).shape()[1];
        for j in 0..width {
            self.params.get_mut(w).data_mut()[j] = 0.0;
        }
        self.params.get_mut(out_b).data_mut()[0] = -1e3;
    }

    /// Remove every dependence of color on the viewing direction.
    pub fn zero_direction_weights(&mut self) {
        let wi = 2 * self.color_layer();
        let t = self.params.get_mut(wi);
        let (o, i) = (t.shape()[0], t.shape()[1]);
        let dir_len = encoded_len(self.dir_freqs);
        for r in 0..o {
            for c in i - dir_len..i {
                t.data_mut()[r * i + c] = 0.0;
            }
        }
    }
}

impl FieldModel for MlpField {
    type Cache = MlpCache;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, xs: &[Vec3], ds: &[Vec3]) -> FieldEval<MlpCache> {
        let rows = xs.len();
        let mut h = Vec::with_capacity(rows * encoded_len(self.pos_freqs));
        for x in xs {
            encode(self.config.normalize(*x), self.pos_freqs, &mut h);
        }
        let mut trunk_inputs = Vec::with_capacity(self.depth + 1);
        for l in 0..self.depth {
            let mut y = self.layer(l).forward(&h, rows);
            relu_in_place(&mut y);
            trunk_inputs.push(std::mem::replace(&mut h, y));
        }
        let out = self.layer(self.depth).forward(&h, rows);
        trunk_inputs.push(h);
        let width = self.layer(self.depth).out_dim() - 1;
        let dir_len = encoded_len(self.dir_freqs);
        let mut color_in = Vec::with_capacity(rows * (width + dir_len));
        let mut pre_sigma = Vec::with_capacity(rows);
        let mut sigma = Vec::with_capacity(rows);
        for r in 0..rows {
            let o = &out[r * (width + 1)..(r + 1) * (width + 1)];
            let z = o[0] + self.config.density_shift;
            pre_sigma.push(z);
            sigma.push(softplus(z));
            color_in.extend_from_slice(&o[1..]);
            encode(ds[r], self.dir_freqs, &mut color_in);
        }
        let mut color_hidden = self.layer(self.color_layer()).forward(&color_in, rows);
        relu_in_place(&mut color_hidden);
        let logits = self.layer(self.color_layer() + 1).forward(&color_hidden, rows);
        let rgb: Vec<[f64; 3]> =
            logits.chunks_exact(3).map(|l| [sigmoid(l[0]), sigmoid(l[1]), sigmoid(l[2])]).collect();
        FieldEval {
            sigma,
            rgb: rgb.clone(),
            cache: MlpCache { rows, trunk_inputs, pre_sigma, color_in, color_hidden, rgb },
        }
    }

    fn backward(&self, cache: &MlpCache, d_sigma: &[f64], d_rgb: &[[f64; 3]], grads: &mut [Tensor]) {
        let rows = cache.rows;
        let cl = self.color_layer();
        let mut d_logits = Vec::with_capacity(rows * 3);
        for (c, g) in cache.rgb.iter().zip(d_rgb) {
            for k in 0..3 {
                d_logits.push(g[k] * c[k] * (1.0 - c[k]));
            }
        }
        let (gw, rest) = grads[2 * (cl + 1)..].split_at_mut(1);
        let mut d_hidden =
            self.layer(cl + 1).backward(&cache.color_hidden, &d_logits, rows, &mut gw[0], &mut rest[0], true).unwrap();
        relu_mask(&mut d_hidden, &cache.color_hidden);
        let (gw, rest) = grads[2 * cl..].split_at_mut(1);
        let d_color_in = self.layer(cl).backward(&cache.color_in, &d_hidden, rows, &mut gw[0], &mut rest[0], true).unwrap();
        let width = self.layer(self.depth).out_dim() - 1;
        let color_in_len = self.layer(cl).in_dim();
        let mut d_out = Vec::with_capacity(rows * (width + 1));
        for r in 0..rows {
            d_out.push(d_sigma[r] * sigmoid(cache.pre_sigma[r]));
            d_out.extend_from_slice(&d_color_in[r * color_in_len..r * color_in_len + width]);
        }
        let mut dy = d_out;
        for l in (0..=self.depth).rev() {
            let x = &cache.trunk_inputs[l];
            let (gw, rest) = grads[2 * l..].split_at_mut(1);
            let want = l > 0;
            let dx = self.layer(l).backward(x, &dy, rows, &mut gw[0], &mut rest[0], want);
            if let Some(mut dx) = dx {
                relu_mask(&mut dx, x);
                dy = dx;
            }
        }
    }
}

/// Dense vertex grid over the aabb with trilinear interpolation; channel 0
/// is raw density, the rest feed a linear, direction-aware color head.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    config: FieldConfig,
    params: ParamSet,
    resolution: usize,
    features: usize,
    dir_freqs: usize,
}

pub struct GridCache {
    /// Eight (vertex index, weight) pairs per point; empty outside the aabb.
    corners: Vec<Option<[(usize, f64); 8]>>,
    head_in: Vec<f64>,
    rgb: Vec<[f64; 3]>,
    inside: Vec<bool>,
    pre_sigma: Vec<f64>,
}

impl GridField {
    pub fn new(config: &FieldConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let Backbone::Grid { resolution, features, dir_freqs } = config.backbone else {
            return Err(Error::invalid("GridField needs a grid backbone"));
        };
        let channels = 1 + features;
        let mut params = ParamSet::new();
        params.push("grid", nn::uniform(&[resolution * resolution * resolution, channels], -0.1, 0.1, rng));
        let head_in = features + encoded_len(dir_freqs);
        params.push("head/w", nn::normal(&[3, head_in], 0.1, rng));
        params.push("head/b", Tensor::zeros([3]));
        Ok(GridField { config: config.clone(), params, resolution, features, dir_freqs })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    fn channels(&self) -> usize {
        1 + self.features
    }

    fn corners(&self, x: Vec3) -> Option<[(usize, f64); 8]> {
        let u = self.config.normalize(x);
        let n = self.resolution;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if !(-1.0..=1.0).contains(&u[a]) {
                return None;
            }
            let g = (u[a] + 1.0) * 0.5 * (n - 1) as f64;
            let i = (g.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = g - i as f64;
        }
        let mut out = [(0usize, 0.0); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
            let idx = ((base[2] + dz) * n + (base[1] + dy)) * n + (base[0] + dx);
            *slot = (idx, w);
        }
        Some(out)
    }

    pub fn set_zero_density(&mut self) {
        let c = self.channels();
        for (i, v) in self.params.get_mut(0).data_mut().iter_mut().enumerate() {
            if i % c == 0 {
                *v = -1e3;
            }
        }
    }

    pub fn zero_direction_weights(&mut self) {
        let t = self.params.get_mut(1);
        let i = t.shape()[1];
        for r in 0..3 {
            for c in self.features..i {
                t.data_mut()[r * i + c] = 0.0;
            }
        }
    }
}

impl FieldModel for GridField {
    type Cache = GridCache;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, xs: &[Vec3], ds: &[Vec3]) -> FieldEval<GridCache> {
        let rows = xs.len();
        let c = self.channels();
        let grid = self.params.get(0).data();
        let head_len = self.features + encoded_len(self.dir_freqs);
        let mut corners = Vec::with_capacity(rows);
        let mut head_in = Vec::with_capacity(rows * head_len);
        let mut inside = Vec::with_capacity(rows);
        let mut pre_sigma = Vec::with_capacity(rows);
        let mut sigma = Vec::with_capacity(rows);
        for (x, d) in xs.iter().zip(ds) {
            let cs = self.corners(*x);
            let mut interp = vec![0.0; c];
            if let Some(cs) = &cs {
                for &(idx, w) in cs {
                    for (ch, v) in interp.iter_mut().enumerate() {
                        *v += w * grid[idx * c + ch];
                    }
                }
            }
            let z = interp[0] + self.config.density_shift;
            pre_sigma.push(z);
            sigma.push(if cs.is_some() { softplus(z) } else { 0.0 });
            inside.push(cs.is_some());
            corners.push(cs);
            head_in.extend_from_slice(&interp[1..]);
            encode(*d, self.dir_freqs, &mut head_in);
        }
        let head = DenseRef { w: self.params.get(1), b: self.params.get(2) };
        let logits = head.forward(&head_in, rows);
        let rgb: Vec<[f64; 3]> =
            logits.chunks_exact(3).map(|l| [sigmoid(l[0]), sigmoid(l[1]), sigmoid(l[2])]).collect();
        FieldEval { sigma, rgb: rgb.clone(), cache: GridCache { corners, head_in, rgb, inside, pre_sigma } }
    }

    fn backward(&self, cache: &GridCache, d_sigma: &[f64], d_rgb: &[[f64; 3]], grads: &mut [Tensor]) {
        let rows = cache.rgb.len();
        let c = self.channels();
        let mut d_logits = Vec::with_capacity(rows * 3);
        for (col, g) in cache.rgb.iter().zip(d_rgb) {
            for k in 0..3 {
                d_logits.push(g[k] * col[k] * (1.0 - col[k]));
            }
        }
        let head = DenseRef { w: self.params.get(1), b: self.params.get(2) };
        let (g_grid, g_head) = grads.split_at_mut(1);
        let (gw, gb) = g_head.split_at_mut(1);
        let d_head_in = head.backward(&cache.head_in, &d_logits, rows, &mut gw[0], &mut gb[0], true).unwrap();
        let head_len = head.in_dim();
        let gg = g_grid[0].data_mut();
        for r in 0..rows {
            let Some(cs) = &cache.corners[r] else { continue };
            let ds = if cache.inside[r] { d_sigma[r] * sigmoid(cache.pre_sigma[r]) } else { 0.0 };
            let df = &d_head_in[r * head_len..r * head_len + self.features];
            for &(idx, w) in cs {
                gg[idx * c] += w * ds;
                for (ch, g) in df.iter().enumerate() {
                    gg[idx * c + 1 + ch] += w * g;
                }
            }
        }
    }
}

/// Either backbone behind one type, so checkpoints and training code need
/// not be generic.
#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    Mlp(MlpField),
    Grid(GridField),
}

pub enum FieldCache {
    Mlp(MlpCache),
    Grid(GridCache),
}

impl Field {
    pub fn new(config: &FieldConfig, rng: &mut Rng) -> Result<Self> {
        Ok(match config.backbone {
            Backbone::Mlp { .. } => Field::Mlp(MlpField::new(config, rng)?),
            Backbone::Grid { .. } => Field::Grid(GridField::new(config, rng)?),
        })
    }

    pub fn config(&self) -> &FieldConfig {
        match self {
            Field::Mlp(f) => f.config(),
            Field::Grid(f) => f.config(),
        }
    }

    pub fn set_zero_density(&mut self) {
        match self {
            Field::Mlp(f) => f.set_zero_density(),
            Field::Grid(f) => f.set_zero_density(),
        }
    }

    pub fn zero_direction_weights(&mut self) {
        match self {
            Field::Mlp(f) => f.zero_direction_weights(),
            Field::Grid(f) => f.zero_direction_weights(),
        }
    }

    /// Density and color at one point.
    pub fn query(&self, x: Vec3, d: Vec3) -> Result<(f64, [f64; 3])> {
        if !x.iter().chain(&d).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field query".into()));
        }
        let n = crate::geometry::norm(d);
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("view direction has norm {n}")));
        }
        let e = self.forward(&[x], &[d]);
        Ok((e.sigma[0], e.rgb[0]))
    }
}

impl FieldModel for Field {
    type Cache = FieldCache;

    fn params(&self) -> &ParamSet {
        match self {
            Field::Mlp(f) => f.params(),
            Field::Grid(f) => f.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Field::Mlp(f) => f.params_mut(),
            Field::Grid(f) => f.params_mut(),
        }
    }

    fn forward(&self, xs: &[Vec3], ds: &[Vec3]) -> FieldEval<FieldCache> {
        match self {
            Field::Mlp(f) => {
                let e = f.forward(xs, ds);
                FieldEval { sigma: e.sigma, rgb: e.rgb, cache: FieldCache::Mlp(e.cache) }
            }
            Field::Grid(f) => {
                let e = f.forward(xs, ds);
                FieldEval { sigma: e.sigma, rgb: e.rgb, cache: FieldCache::Grid(e.cache) }
            }
        }
    }

    fn backward(&self, cache: &FieldCache, d_sigma: &[f64], d_rgb: &[[f64; 3]], grads: &mut [Tensor]) {
        match (self, cache) {
            (Field::Mlp(f), FieldCache::Mlp(c)) => f.backward(c, d_sigma, d_rgb, grads),
            (Field::Grid(f), FieldCache::Grid(c)) => f.backward(c, d_sigma, d_rgb, grads),
            _ => panic!("field cache from a different backbone"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn tiny_mlp() -> FieldConfig {
        FieldConfig {
            backbone: Backbone::Mlp { pos_freqs: 2, dir_freqs: 1, width: 12, depth: 2, color_width: 6 },
            ..FieldConfig::default()
        }
    }

    fn tiny_grid() -> FieldConfig {
        FieldConfig { backbone: Backbone::Grid { resolution: 4, features: 3, dir_freqs: 1 }, ..FieldConfig::default() }
    }

    fn random_points(n: usize, seed: u64) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut r = rng::stream(seed, "pts", 0);
        let xs = (0..n).map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.2), r.gen_range(-2.0..2.0)]).collect();
        let ds = (0..n)
            .map(|_| crate::geometry::normalize([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]))
            .collect();
        (xs, ds)
    }

    /// Scalar probe loss Σ a·σ + Σ b·rgb, differentiated against central
    /// differences on every parameter.
    fn check_gradients(mut field: Field) {
        let (xs, ds) = random_points(7, 1);
        let mut r = rng::stream(2, "coef", 0);
        let a: Vec<f64> = (0..7).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<[f64; 3]> = (0..7).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect();
        let loss = |f: &Field| {
            let e = f.forward(&xs, &ds);
            let mut l = 0.0;
            for i in 0..7 {
                l += a[i] * e.sigma[i] + (0..3).map(|k| b[i][k] * e.rgb[i][k]).sum::<f64>();
            }
            l
        };
        let e = field.forward(&xs, &ds);
        let mut grads = field.params().zeros_like();
        field.backward(&e.cache, &a, &b, &mut grads);
        let mut checked = 0;
        for p in 0..field.params().len() {
            let n = field.params().get(p).numel();
            for j in (0..n).step_by((n / 10).max(1)) {
                let orig = field.params().get(p).data()[j];
                let h = 1e-5;
                field.params_mut().get_mut(p).data_mut()[j] = orig + h;
                let lp = loss(&field);
                field.params_mut().get_mut(p).data_mut()[j] = orig - h;
                let lm = loss(&field);
                field.params_mut().get_mut(p).data_mut()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[p].data()[j];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "param {p}[{j}]: fd {fd} vs {an}");
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        check_gradients(Field::new(&tiny_mlp(), &mut rng::stream(0, "f", 0)).unwrap());
    }

    #[test]
    fn grid_gradients_match_finite_differences() {
        check_gradients(Field::new(&tiny_grid(), &mut rng::stream(0, "f", 0)).unwrap());
    }

    #[test]
    fn outputs_in_range_and_pure() {
        for cfg in [FieldConfig::default(), FieldConfig::grid(8, 4)] {
            let f = Field::new(&cfg, &mut rng::stream(3, "f", 0)).unwrap();
            let (xs, ds) = random_points(200, 4);
            let a = f.forward(&xs, &ds);
            let b = f.forward(&xs, &ds);
            assert_eq!(a.sigma, b.sigma);
            assert_eq!(a.rgb, b.rgb);
            assert!(a.sigma.iter().all(|s| s.is_finite() && *s >= 0.0));
            assert!(a.rgb.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn query_rejects_bad_inputs() {
        let f = Field::new(&tiny_mlp(), &mut rng::stream(0, "f", 0)).unwrap();
        assert!(f.query([f64::NAN, 0.0, 0.0], [0.0, 0.0, 1.0]).is_err());
        assert!(f.query([0.0; 3], [0.0, 0.0, 2.0]).is_err());
        assert!(f.query([0.0; 3], [0.0, 0.0, 1.0]).is_ok());
    }

    #[test]
    fn zeroed_direction_weights_remove_view_dependence() {
        for cfg in [tiny_mlp(), tiny_grid()] {
            let mut f = Field::new(&cfg, &mut rng::stream(5, "f", 0)).unwrap();
            f.zero_direction_weights();
            let (xs, ds) = random_points(50, 6);
            let (_, ds2) = random_points(50, 7);
            assert_eq!(f.forward(&xs, &ds).rgb, f.forward(&xs, &ds2).rgb);
        }
    }

    #[test]
    fn zero_density_is_exactly_zero() {
        for cfg in [tiny_mlp(), tiny_grid()] {
            let mut f = Field::new(&cfg, &mut rng::stream(5, "f", 0)).unwrap();
            f.set_zero_density();
            let (xs, ds) = random_points(50, 8);
            assert!(f.forward(&xs, &ds).sigma.iter().all(|s| *s == 0.0));
        }
    }

    #[test]
    fn grid_interpolates_vertex_values_exactly() {
        let cfg = tiny_grid();
        let mut f = GridField::new(&cfg, &mut rng::stream(0, "f", 0)).unwrap();
        // density channel set to an affine function of position is
        // reproduced exactly by trilinear interpolation
        let n = 4;
        let c = 4;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    f.params_mut().get_mut(0).data_mut()[((z * n + y) * n + x) * c] = x as f64 + 2.0 * y as f64 - z as f64;
                }
            }
        }
        let (xs, ds) = random_points(30, 9);
        let e = f.forward(&xs, &ds);
        for (x, s) in xs.iter().zip(&e.sigma) {
            let u = cfg.normalize(*x);
            let g: Vec<f64> = u.iter().map(|v| (v + 1.0) * 0.5 * 3.0).collect();
            let raw = g[0] + 2.0 * g[1] - g[2];
            assert!((softplus(raw + cfg.density_shift) - s).abs() < 1e-10);
        }
    }
}
