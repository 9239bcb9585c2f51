//! Image quality and consistency metrics.
//!
//! The perceptual distance here is the feature-space distance of
//! [`crate::perceptual`]; with the default random feature pyramid it is an
//! LPIPS-like proxy, not the published LPIPS network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::perceptual::{perceptual_loss, FeatureBackend, FeatureExtractor};
use crate::autodiff::Tape;
use crate::rng;
use crate::scene_io::{generate_ray, CameraIntrinsics, CameraPose, DepthMap, SceneDataset};
use crate::geometry;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "images are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(peak² / MSE)`; `f64::INFINITY` when the images are equal.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..k).map(|j| g[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..k).map(|i| g[i] * rows[(r + i) * wo + c]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean structural similarity with an 11-tap Gaussian window (σ = 1.5),
/// `k1 = 0.01`, `k2 = 0.03`, dynamic range 1, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let g = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = (0..h * w).map(|p| a.data()[p * 3 + ch]).collect();
        let y: Vec<f64> = (0..h * w).map(|p| b.data()[p * 3 + ch]).collect();
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
        let (mx, _, _) = filter_valid(&x, h, w, &g);
        let (my, _, _) = filter_valid(&y, h, w, &g);
        let (sxx, _, _) = filter_valid(&prod(&x, &x), h, w, &g);
        let (syy, _, _) = filter_valid(&prod(&y, &y), h, w, &g);
        let (sxy, _, _) = filter_valid(&prod(&x, &y), h, w, &g);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Perceptual-feature distance of two images (LPIPS proxy).
pub fn perceptual_distance(extractor: &FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let shape = [1, 3, a.height(), a.width()];
    perceptual_loss(extractor, &a.to_tensor().reshape(shape), &b.to_tensor().reshape(shape))
}

/// Deepest feature stage, averaged over positions: one vector per image.
pub fn kid_features(extractor: &FeatureExtractor, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|im| {
            let tape = Tape::new();
            let x = tape.constant(im.to_tensor().reshape([1, 3, im.height(), im.width()]));
            let stages = extractor.stages(x)?;
            let deepest = stages.last().expect("at least one stage").value();
            let (_, c, h, w) = deepest.dims4();
            Ok((0..c).map(|k| deepest.data()[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect())
        })
        .collect()
}

fn cubic_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d + 1.0).powi(3)
}

/// Unbiased MMD² with the kernel `k(x, y) = (xᵀy / d + 1)³` over the full sets.
pub fn kid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (real.len(), fake.len());
    if m < 2 || n < 2 {
        return Err(Error::invalid("KID needs at least two feature vectors per set"));
    }
    let d = real[0].len();
    if d == 0 || real.iter().chain(fake).any(|v| v.len() != d) {
        return Err(Error::shape("feature vectors must share a positive dimension"));
    }
    // Running means stay exact when every kernel value is equal, so
    // identical degenerate sets give exactly zero.
    let mean = |vals: &mut dyn Iterator<Item = f64>| {
        let mut mu = 0.0;
        for (k, v) in vals.enumerate() {
            mu = if k == 0 { v } else { mu + (v - mu) / (k + 1) as f64 };
        }
        mu
    };
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        mean(&mut (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| cubic_kernel(&s[i], &s[j])))
    };
    let cross = mean(&mut real.iter().flat_map(|x| fake.iter().map(move |y| cubic_kernel(x, y))));
    Ok(within(real) + within(fake) - 2.0 * cross)
}

/// Mean KID over `subsets` random subsets of `size` vectors from each set.
pub fn kid_subsampled(real: &[Vec<f64>], fake: &[Vec<f64>], size: usize, subsets: usize, seed: u64) -> Result<f64> {
    use rand::seq::index::sample;
    if size < 2 || size > real.len() || size > fake.len() || subsets == 0 {
        return Err(Error::invalid("subset size must be in 2..=set size and subsets positive"));
    }
    let mut total = 0.0;
    for s in 0..subsets {
        let mut r = rng::stream(seed, "kid-subset", s as u64);
        let ri: Vec<Vec<f64>> = sample(&mut r, real.len(), size).iter().map(|i| real[i].clone()).collect();
        let fi: Vec<Vec<f64>> = sample(&mut r, fake.len(), size).iter().map(|i| fake[i].clone()).collect();
        total += kid(&ri, &fi)?;
    }
    Ok(total / subsets as f64)
}

/// Sliding-window perceptual distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualMap {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub stride: usize,
    /// Row-major, one value per window.
    pub values: Vec<f64>,
}

impl PerceptualMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Window with the largest distance, as `(row, col)` of its top-left pixel.
    pub fn argmax_origin(&self) -> (usize, usize) {
        let i = (0..self.values.len()).fold(0, |b, i| if self.values[i] > self.values[b] { i } else { b });
        ((i / self.cols) * self.stride, (i % self.cols) * self.stride)
    }

    /// Red overlay on `base`: each pixel is tinted by the largest distance
    /// of the windows covering it, scaled by the map maximum.
    pub fn overlay(&self, base: &Image) -> Image {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        Image::from_fn(base.width(), base.height(), |r, c| {
            let mut v: f64 = 0.0;
            for wr in 0..self.rows {
                for wc in 0..self.cols {
                    let (r0, c0) = (wr * self.stride, wc * self.stride);
                    if (r0..r0 + self.patch).contains(&r) && (c0..c0 + self.patch).contains(&c) {
                        v = v.max(self.get(wr, wc));
                    }
                }
            }
            let a = if max > 0.0 { 0.6 * v / max } else { 0.0 };
            let p = base.pixel(r, c);
            [p[0] * (1.0 - a) + a, p[1] * (1.0 - a), p[2] * (1.0 - a)]
        })
    }
}

pub fn patch_perceptual_map(
    extractor: &FeatureExtractor,
    prediction: &Image,
    ground_truth: &Image,
    patch: usize,
    stride: usize,
) -> Result<PerceptualMap> {
    check_same(prediction, ground_truth)?;
    let (h, w) = (prediction.height(), prediction.width());
    if patch == 0 || patch > h || patch > w {
        return Err(Error::invalid(format!("patch {patch} does not fit a {h}x{w} image")));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let rows = (h - patch) / stride + 1;
    let cols = (w - patch) / stride + 1;
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let a = prediction.crop(r * stride, c * stride, patch, patch)?;
            let b = ground_truth.crop(r * stride, c * stride, patch, patch)?;
            values.push(perceptual_distance(extractor, &a, &b)?);
        }
    }
    Ok(PerceptualMap { rows, cols, patch, stride, values })
}

/// A camera with known per-pixel depth (distance along the unit ray).
#[derive(Clone, Debug)]
pub struct DepthView<'a> {
    pub intrinsics: &'a CameraIntrinsics,
    pub pose: &'a CameraPose,
    pub depth: &'a DepthMap,
}

/// Pixel of `to` containing the projection of `x`, if it sees `x` unoccluded.
fn visible_pixel(x: geometry::Vec3, to: &DepthView, tolerance: f64) -> Option<(usize, usize)> {
    let (row, col) = to.intrinsics.project(to.pose.to_camera(x))?;
    if !to.intrinsics.contains(row, col) {
        return None;
    }
    let (r, c) = (row as usize, col as usize);
    let dist = geometry::norm(geometry::sub(x, to.pose.translation));
    ((to.depth.get(r, c) - dist).abs() <= tolerance * dist).then_some((r, c))
}

/// Bilinear color of `frame` (seen by `to`) at world point `x`. Every
/// pixel with a nonzero weight must be inside the frame and see `x`
/// unoccluded, otherwise the point counts as not visible.
fn visible_color(x: geometry::Vec3, to: &DepthView, frame: &Image, tolerance: f64) -> Option<[f64; 3]> {
    let (row, col) = to.intrinsics.project(to.pose.to_camera(x))?;
    // pixel centers sit at half-integer coordinates; snap round-off so an
    // exact hit does not pull in a neighbor
    let snap = |z: f64| if (z - z.round()).abs() < 1e-9 { z.round() } else { z };
    let (v, u) = (snap(row - 0.5), snap(col - 0.5));
    let (r0, c0) = (v.floor(), u.floor());
    let (fr, fc) = (v - r0, u - c0);
    let dist = geometry::norm(geometry::sub(x, to.pose.translation));
    let mut color = [0.0; 3];
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let w = wr * wc;
            if w == 0.0 {
                continue;
            }
            let (r, c) = (r0 + dr, c0 + dc);
            if r < 0.0 || c < 0.0 || r >= to.intrinsics.height as f64 || c >= to.intrinsics.width as f64 {
                return None;
            }
            let (r, c) = (r as usize, c as usize);
            if (to.depth.get(r, c) - dist).abs() > tolerance * dist {
                return None;
            }
            let p = frame.pixel(r, c);
            for k in 0..3 {
                color[k] += w * p[k];
            }
        }
    }
    Some(color)
}

fn surface_point(view: &DepthView, r: usize, c: usize) -> geometry::Vec3 {
    let ray = generate_ray(view.intrinsics, view.pose, (r as f64 + 0.5, c as f64 + 0.5)).expect("pixel center");
    ray.at(view.depth.get(r, c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Mean squared color difference of corresponding pixels, per consecutive frame pair.
    pub pair_mse: Vec<f64>,
    pub pair_valid_pixels: Vec<usize>,
    pub mean_mse: f64,
    pub protocol: String,
}

/// Reproject every pixel of frame `t` into frame `t + 1` through its
/// ground-truth depth and compare against the bilinearly warped color,
/// skipping points outside the next frame or occluded there (relative
/// depth disagreement above `tolerance`).
pub fn view_consistency_mse(frames: &[Image], views: &[DepthView], tolerance: f64) -> Result<ConsistencyReport> {
    if frames.len() != views.len() {
        return Err(Error::shape(format!("{} frames for {} cameras", frames.len(), views.len())));
    }
    if frames.len() < 2 {
        return Err(Error::invalid("need at least two frames"));
    }
    for (f, v) in frames.iter().zip(views) {
        if f.width() != v.intrinsics.width || f.height() != v.intrinsics.height {
            return Err(Error::shape("frame size disagrees with its camera"));
        }
        if v.depth.width != f.width() || v.depth.height != f.height() {
            return Err(Error::shape("depth map size disagrees with its frame"));
        }
    }
    let mut pair_mse = Vec::new();
    let mut pair_valid = Vec::new();
    for t in 0..frames.len() - 1 {
        let (a, b) = (&frames[t], &frames[t + 1]);
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..a.height() {
            for c in 0..a.width() {
                let x = surface_point(&views[t], r, c);
                if let Some(q) = visible_color(x, &views[t + 1], b, tolerance) {
                    let p = a.pixel(r, c);
                    sum += (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>() / 3.0;
                    count += 1;
                }
            }
        }
        pair_mse.push(if count > 0 { sum / count as f64 } else { 0.0 });
        pair_valid.push(count);
    }
    let mean_mse = pair_mse.iter().sum::<f64>() / pair_mse.len() as f64;
    Ok(ConsistencyReport {
        pair_mse,
        pair_valid_pixels: pair_valid,
        mean_mse,
        protocol: "ground-truth depth reprojection, bilinear backward warp (not optical flow)".into(),
    })
}

/// Column `column` of every frame, side by side in frame order.
pub fn pixel_column_strip(frames: &[Image], column: usize) -> Result<Image> {
    let first = frames.first().ok_or_else(|| Error::invalid("no frames"))?;
    let h = first.height();
    for f in frames {
        if f.height() != h {
            return Err(Error::shape("frames differ in height"));
        }
        if column >= f.width() {
            return Err(Error::OutOfBounds(format!("column {column} of a {}-wide frame", f.width())));
        }
    }
    Ok(Image::from_fn(frames.len(), h, |r, c| frames[c].pixel(r, column)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Per test image, row-major count of training views seeing each pixel's
    /// surface point; `None` for pixels without a surface.
    pub counts: Vec<Vec<Option<u32>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageBin {
    pub views: u32,
    pub pixels: usize,
    pub psnr: f64,
}

/// For each test pixel, the number of training views whose frustum
/// contains its surface point and whose depth confirms visibility.
pub fn view_coverage(dataset: &SceneDataset, tolerance: f64) -> Result<CoverageReport> {
    fn depth_of(im: &crate::scene_io::PosedImage) -> Result<&DepthMap> {
        im.depth.as_ref().ok_or_else(|| Error::invalid("view coverage needs ground-truth depth"))
    }
    let train: Vec<DepthView> = dataset
        .train_images
        .iter()
        .map(|im| Ok(DepthView { intrinsics: &im.intrinsics, pose: &im.pose, depth: depth_of(im)? }))
        .collect::<Result<_>>()?;
    let mut counts = Vec::with_capacity(dataset.test_images.len());
    for im in &dataset.test_images {
        let view = DepthView { intrinsics: &im.intrinsics, pose: &im.pose, depth: depth_of(im)? };
        let (w, h) = (im.intrinsics.width, im.intrinsics.height);
        let mut c = Vec::with_capacity(w * h);
        for r in 0..h {
            for col in 0..w {
                if view.depth.get(r, col) >= dataset.bounds.far {
                    c.push(None);
                    continue;
                }
                let x = surface_point(&view, r, col);
                c.push(Some(train.iter().filter(|t| visible_pixel(x, t, tolerance).is_some()).count() as u32));
            }
        }
        counts.push(c);
    }
    Ok(CoverageReport { counts })
}

/// PSNR of predictions grouped by coverage count.
pub fn coverage_curve(report: &CoverageReport, predictions: &[Image], truths: &[Image]) -> Result<Vec<CoverageBin>> {
    if predictions.len() != truths.len() || predictions.len() != report.counts.len() {
        return Err(Error::shape("coverage, prediction and ground-truth lists differ in length"));
    }
    let mut bins: std::collections::BTreeMap<u32, (usize, f64)> = Default::default();
    for ((p, t), counts) in predictions.iter().zip(truths).zip(&report.counts) {
        check_same(p, t)?;
        for (i, c) in counts.iter().enumerate() {
            let Some(c) = c else { continue };
            let e: f64 = (0..3).map(|k| (p.data()[i * 3 + k] - t.data()[i * 3 + k]).powi(2)).sum::<f64>() / 3.0;
            let b = bins.entry(*c).or_default();
            b.0 += 1;
            b.1 += e;
        }
    }
    Ok(bins
        .into_iter()
        .map(|(views, (pixels, sum))| {
            let m = sum / pixels as f64;
            CoverageBin { views, pixels, psnr: if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() } }
        })
        .collect())
}

/// Per-image scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub name: String,
    /// `None` when the images are identical (infinite PSNR).
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageScores>,
    pub mean_psnr: Option<f64>,
    pub mean_psnr_infinite: bool,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
    pub kid: f64,
    pub perceptual_kind: String,
    pub metadata: std::collections::BTreeMap<String, String>,
}

/// Score named prediction/ground-truth pairs.
pub fn evaluate_images(
    extractor: &FeatureExtractor,
    pairs: &[(String, Image, Image)],
    metadata: std::collections::BTreeMap<String, String>,
) -> Result<MetricReport> {
    if pairs.len() < 2 {
        return Err(Error::invalid("evaluation needs at least two images (KID)"));
    }
    let mut images = Vec::with_capacity(pairs.len());
    for (name, pred, gt) in pairs {
        let p = psnr(pred, gt, 1.0)?;
        images.push(ImageScores {
            name: name.clone(),
            psnr: p.is_finite().then_some(p),
            psnr_infinite: p.is_infinite(),
            ssim: ssim(pred, gt)?,
            perceptual: perceptual_distance(extractor, pred, gt)?,
        });
    }
    let n = images.len() as f64;
    let infinite = images.iter().any(|s| s.psnr_infinite);
    let mean_psnr = (!infinite).then(|| images.iter().map(|s| s.psnr.unwrap_or(0.0)).sum::<f64>() / n);
    let preds: Vec<Image> = pairs.iter().map(|p| p.1.clone()).collect();
    let gts: Vec<Image> = pairs.iter().map(|p| p.2.clone()).collect();
    let kid_value = kid(&kid_features(extractor, &gts)?, &kid_features(extractor, &preds)?)?;
    let perceptual_kind = match extractor.config().backend {
        crate::perceptual::BackendConfig::Pretrained { .. } => "perceptual distance (configured pretrained features)",
        crate::perceptual::BackendConfig::RandomPyramid { .. } => "perceptual distance (LPIPS-proxy, random feature pyramid)",
    };
    Ok(MetricReport {
        mean_ssim: images.iter().map(|s| s.ssim).sum::<f64>() / n,
        mean_perceptual: images.iter().map(|s| s.perceptual).sum::<f64>() / n,
        images,
        mean_psnr,
        mean_psnr_infinite: infinite,
        kid: kid_value,
        perceptual_kind: perceptual_kind.into(),
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::PerceptualConfig;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut r = rng::stream(seed, "metric-image", 0);
        Image::from_fn(w, h, |_, _| [r.gen(), r.gen(), r.gen()])
    }

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::new(&PerceptualConfig::default()).unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = random_image(16, 16, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let g = Image::filled(8, 8, [0.5; 3]);
        let off = Image::filled(8, 8, [0.6; 3]);
        assert!((psnr(&g, &off, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&g, &Image::filled(4, 8, [0.5; 3]), 1.0).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula_and_is_symmetric() {
        for s in 0..5 {
            let (a, b) = (random_image(9, 7, s), random_image(9, 7, s + 100));
            let mut sum = 0.0;
            for r in 0..7 {
                for c in 0..9 {
                    for k in 0..3 {
                        sum += (a.pixel(r, c)[k] - b.pixel(r, c)[k]).powi(2);
                    }
                }
            }
            let oracle = 10.0 * (1.0 / (sum / (7.0 * 9.0 * 3.0))).log10();
            assert!((psnr(&a, &b, 1.0).unwrap() - oracle).abs() < 1e-9);
            assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }
    }

    /// Direct 2D window sums, no separability.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (h, w) = (a.height(), a.width());
        let s2 = 2.0 * 1.5 * 1.5;
        let mut win = vec![vec![0.0; 11]; 11];
        let mut tot = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / s2)).exp();
                tot += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut acc = 0.0;
        let mut n = 0.0;
        for k in 0..3 {
            for r in 0..=h - 11 {
                for c in 0..=w - 11 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let g = win[i][j] / tot;
                            let (x, y) = (a.pixel(r + i, c + j)[k], b.pixel(r + i, c + j)[k]);
                            mx += g * x;
                            my += g * y;
                            xx += g * x * x;
                            yy += g * y * y;
                            xy += g * x * y;
                        }
                    }
                    let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1.0;
                }
            }
        }
        acc / n
    }

    #[test]
    fn ssim_identities_and_oracle() {
        let a = random_image(20, 16, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        for s in 0..10 {
            let a = random_image(16, 14, 10 + s);
            let b = random_image(16, 14, 50 + s).map(|v| 0.5 * v) ;
            let mixed = Image::new(16, 14, a.data().iter().zip(b.data()).map(|(x, y)| 0.6 * x + y * 0.8).map(|v| v.min(1.0)).collect()).unwrap();
            assert!((ssim(&a, &mixed).unwrap() - ssim_oracle(&a, &mixed)).abs() < 1e-4);
        }
        assert!(ssim(&Image::filled(10, 10, [0.0; 3]), &Image::filled(10, 10, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_low() {
        let a = Image::from_fn(24, 24, |r, c| if (r / 2 + c / 2) % 2 == 0 { [1.0; 3] } else { [0.0; 3] });
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.1);
    }

    fn box_blur(im: &Image, radius: usize) -> Image {
        let (w, h) = (im.width(), im.height());
        Image::from_fn(w, h, |r, c| {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for rr in r.saturating_sub(radius)..=(r + radius).min(h - 1) {
                for cc in c.saturating_sub(radius)..=(c + radius).min(w - 1) {
                    let p = im.pixel(rr, cc);
                    for k in 0..3 {
                        acc[k] += p[k];
                    }
                    n += 1.0;
                }
            }
            acc.map(|v| v / n)
        })
    }

    #[test]
    fn perceptual_distance_properties() {
        let ex = extractor();
        let tex = Image::from_fn(32, 32, |r, c| {
            let v = if (r / 3 + c / 3) % 2 == 0 { 0.9 } else { 0.1 };
            [v, 1.0 - v, 0.5 + 0.4 * ((r as f64) * 0.7).sin()]
        });
        assert_eq!(perceptual_distance(&ex, &tex, &tex).unwrap(), 0.0);
        let d: Vec<f64> = [1, 2, 3].iter().map(|&r| perceptual_distance(&ex, &tex, &box_blur(&tex, r)).unwrap()).collect();
        assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
        let other = random_image(32, 32, 4);
        let (x, y) = (perceptual_distance(&ex, &tex, &other).unwrap(), perceptual_distance(&ex, &other, &tex).unwrap());
        assert!((x - y).abs() < 1e-9);
    }

    #[test]
    fn kid_closed_forms() {
        let v = vec![0.3, -1.2, 2.0];
        assert_eq!(kid(&vec![v.clone(); 5], &vec![v; 7]).unwrap(), 0.0);
        for d in [2usize, 5, 16] {
            let mut e1 = vec![0.0; d];
            let mut e2 = vec![0.0; d];
            e1[0] = 1.0;
            e2[1] = 1.0;
            let want = 2.0 * (1.0 + 1.0 / d as f64).powi(3) - 2.0;
            assert!((kid(&vec![e1; 4], &vec![e2; 6]).unwrap() - want).abs() < 1e-9);
        }
        assert!(kid(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn kid_of_same_distribution_concentrates() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let draw = |n: usize, seed: u64| -> Vec<Vec<f64>> {
            let mut r = rng::stream(seed, "kid-sample", 0);
            (0..n).map(|_| (0..8).map(|_| normal.sample(&mut r)).collect()).collect()
        };
        let small = kid(&draw(50, 1), &draw(50, 2)).unwrap().abs();
        let large = kid(&draw(500, 3), &draw(500, 4)).unwrap().abs();
        assert!(large < 0.01, "{large}");
        assert!(small < 0.1, "{small}");
        let sub = kid_subsampled(&draw(100, 5), &draw(100, 6), 50, 4, 9).unwrap();
        assert_eq!(sub, kid_subsampled(&draw(100, 5), &draw(100, 6), 50, 4, 9).unwrap());
    }

    #[test]
    fn patch_map_localizes_corruption() {
        let ex = extractor();
        let gt = random_image(192, 192, 7).map(|v| 0.3 + 0.4 * v);
        assert!(patch_perceptual_map(&ex, &gt, &gt, 96, 32).unwrap().values.iter().all(|&v| v == 0.0));
        let mut pred = gt.clone();
        for r in 96..192 {
            for c in 0..96 {
                pred.set_pixel(r, c, [1.0, 0.0, 0.0]);
            }
        }
        let map = patch_perceptual_map(&ex, &pred, &gt, 96, 32).unwrap();
        assert_eq!((map.rows, map.cols), (4, 4));
        assert_eq!(map.argmax_origin(), (96, 0));
        let whole = patch_perceptual_map(&ex, &pred, &gt, 96, 192).unwrap();
        assert_eq!((whole.rows, whole.cols), (2 - 1, 1));
        let crop = |im: &Image| im.crop(0, 0, 96, 96).unwrap();
        assert_eq!(whole.values[0], perceptual_distance(&ex, &crop(&pred), &crop(&gt)).unwrap());
        assert!(patch_perceptual_map(&ex, &pred, &gt, 200, 8).is_err());
        assert_eq!(map.overlay(&gt).width(), 192);
    }

    fn plane_views(shift_px: f64) -> (CameraIntrinsics, Vec<CameraPose>, Vec<DepthMap>) {
        // Fronto-parallel plane at z = 4 seen by cameras translated along x.
        let k = CameraIntrinsics::centered(20.0, 16, 16).unwrap();
        let step = shift_px * 4.0 / 20.0;
        let poses: Vec<CameraPose> = (0..3).map(|i| CameraPose::new(geometry::IDENTITY, [step * i as f64, 0.0, 0.0]).unwrap()).collect();
        let depths = poses
            .iter()
            .map(|p| {
                let mut data = Vec::new();
                for r in 0..16 {
                    for c in 0..16 {
                        let ray = generate_ray(&k, p, (r as f64 + 0.5, c as f64 + 0.5)).unwrap();
                        data.push(4.0 / ray.direction[2]);
                    }
                }
                DepthMap { width: 16, height: 16, data }
            })
            .collect();
        (k, poses, depths)
    }

    fn plane_frames(shift: usize, tex: &Image) -> Vec<Image> {
        (0..3).map(|i| Image::from_fn(16, 16, |r, c| tex.pixel(r, c + shift * i))).collect()
    }

    #[test]
    fn consistency_of_exact_warps_and_noise() {
        let (k, poses, depths) = plane_views(2.0);
        let views: Vec<DepthView> = poses.iter().zip(&depths).map(|(p, d)| DepthView { intrinsics: &k, pose: p, depth: d }).collect();
        let tex = random_image(32, 16, 8);
        let frames = plane_frames(2, &tex);
        let rep = view_consistency_mse(&frames, &views, 0.02).unwrap();
        assert!(rep.mean_mse < 1e-12, "{rep:?}");
        assert_eq!(rep.pair_valid_pixels, [16 * 14, 16 * 14]);

        let shifted: Vec<Image> = frames.iter().map(|f| f.map(|v| v + 0.25)).collect();
        assert_eq!(view_consistency_mse(&shifted, &views, 0.02).unwrap().mean_mse, rep.mean_mse);

        let s = 0.05;
        let normal = Normal::new(0.0, s).unwrap();
        let flat = Image::filled(64, 64, [0.5; 3]);
        let mut trials = 0.0;
        let reps = 40;
        for t in 0..reps {
            let mut r = rng::stream(t, "consistency-noise", 0);
            let noisy: Vec<Image> = plane_frames(2, &flat)
                .iter()
                .map(|f| Image::new(f.width(), f.height(), f.data().iter().map(|v| v + normal.sample(&mut r)).collect()).unwrap())
                .collect();
            trials += view_consistency_mse(&noisy, &views, 0.02).unwrap().mean_mse;
        }
        let m = trials / reps as f64;
        assert!((m - 2.0 * s * s).abs() < 0.1 * 2.0 * s * s, "{m}");
    }

    #[test]
    fn consistency_of_repeated_frame_is_zero() {
        let (k, poses, depths) = plane_views(0.0);
        let views: Vec<DepthView> = poses.iter().zip(&depths).map(|(p, d)| DepthView { intrinsics: &k, pose: p, depth: d }).collect();
        let f = random_image(16, 16, 2);
        let rep = view_consistency_mse(&[f.clone(), f.clone(), f], &views, 0.02).unwrap();
        assert_eq!(rep.mean_mse, 0.0);
        assert!(view_consistency_mse(&[random_image(16, 16, 1)], &views[..1], 0.02).is_err());
    }

    #[test]
    fn column_strip() {
        let frames: Vec<Image> = (0..6).map(|i| Image::from_fn(8, 5, |_, c| if c >= 2 + i { [1.0; 3] } else { [0.0; 3] })).collect();
        let strip = pixel_column_strip(&frames, 4).unwrap();
        assert_eq!((strip.width(), strip.height()), (6, 5));
        // the edge passes column 4 at frame 2: a diagonal in the strip
        for (f, want) in [(0, 1.0), (1, 1.0), (2, 1.0), (3, 0.0), (5, 0.0)] {
            assert_eq!(strip.pixel(0, f)[0], want);
        }
        let same = vec![frames[0].clone(); 3];
        let s = pixel_column_strip(&same, 1).unwrap();
        assert!((0..5).all(|r| s.pixel(r, 0) == s.pixel(r, 2)));
        assert!(pixel_column_strip(&frames, 8).is_err());
    }

    #[test]
    fn coverage_counts() {
        use crate::scene_io::{PosedImage, SceneBounds};
        // built directly: the constructor rejects a test view equal to a training view
        let (k, poses, depths) = plane_views(4.0);
        let mk = |i: usize| PosedImage {
            pixels: Image::filled(16, 16, [0.5; 3]),
            intrinsics: k,
            pose: poses[i],
            depth: Some(depths[i].clone()),
        };
        let bounds = SceneBounds { near: 0.1, far: 10.0 };
        let same = SceneDataset { train_images: vec![mk(0)], test_images: vec![mk(0)], bounds };
        let rep = view_coverage(&same, 0.02).unwrap();
        assert!(rep.counts[0].iter().all(|c| *c == Some(1)));
        // Second camera shifted 4 px right: its view covers test columns 4..16.
        let two = SceneDataset { train_images: vec![mk(0), mk(1)], test_images: vec![mk(0)], bounds };
        let rep = view_coverage(&two, 0.02).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let want = if c >= 4 { 2 } else { 1 };
                assert_eq!(rep.counts[0][r * 16 + c], Some(want), "pixel {r},{c}");
            }
        }
        // A camera turned away sees nothing.
        let away = PosedImage {
            pose: CameraPose::new(geometry::axis_angle([0.0, 1.0, 0.0], std::f64::consts::PI), [0.0; 3]).unwrap(),
            ..mk(0)
        };
        let back = SceneDataset { train_images: vec![away], test_images: vec![mk(0)], bounds };
        assert!(view_coverage(&back, 0.02).unwrap().counts[0].iter().all(|c| *c == Some(0)));
        let curve = coverage_curve(&rep, &[Image::filled(16, 16, [0.6; 3])], &[Image::filled(16, 16, [0.5; 3])]).unwrap();
        assert_eq!(curve.len(), 2);
        assert!((curve[0].psnr - 20.0).abs() < 1e-9);
    }

    #[test]
    fn identical_sets_report() {
        let ex = extractor();
        let ims: Vec<(String, Image, Image)> =
            (0..3).map(|i| (format!("{i}"), random_image(32, 32, i), random_image(32, 32, i))).collect();
        let rep = evaluate_images(&ex, &ims, Default::default()).unwrap();
        assert!(rep.mean_psnr_infinite && rep.mean_psnr.is_none());
        assert_eq!(rep.mean_ssim, 1.0);
        assert_eq!(rep.mean_perceptual, 0.0);
        // unbiased: identical sets do not score exactly zero
        let f = kid_features(&ex, &ims.iter().map(|p| p.1.clone()).collect::<Vec<_>>()).unwrap();
        assert_eq!(rep.kid, kid(&f, &f).unwrap());
        assert!(rep.kid.abs() < 1e-2);
        assert_eq!(rep.images.len(), 3);
    }

    proptest::proptest! {
        #[test]
        fn psnr_and_ssim_are_symmetric(a in 0u64..500, b in 500u64..1000) {
            let (x, y) = (random_image(16, 16, a), random_image(16, 16, b));
            proptest::prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
            let (s1, s2) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
            proptest::prop_assert!((s1 - s2).abs() < 1e-12 && s1 <= 1.0 && s1 >= -1.0);
        }

        #[test]
        fn kid_is_symmetric(seed in 0u64..200, m in 2usize..8, n in 2usize..8) {
            let mut r = rng::stream(seed, "kid-prop", 0);
            let mut set = |k: usize| -> Vec<Vec<f64>> { (0..k).map(|_| (0..5).map(|_| r.gen::<f64>()).collect()).collect() };
            let (x, y) = (set(m), set(n));
            let (a, b) = (kid(&x, &y).unwrap(), kid(&y, &x).unwrap());
            proptest::prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    fn ground_truth_consistency(spec: &crate::scene_io::SceneSpec) -> ConsistencyReport {
        use crate::scene_io::{orbit_arc, render_view};
        let k = spec.intrinsics().unwrap();
        let poses = orbit_arc(&spec.test_orbit, 6, 0.02).unwrap();
        let (frames, depths): (Vec<Image>, Vec<_>) = poses.iter().map(|p| render_view(spec, &k, p)).unzip();
        let views: Vec<DepthView> = poses.iter().zip(&depths).map(|(p, d)| DepthView { intrinsics: &k, pose: p, depth: d }).collect();
        view_consistency_mse(&frames, &views, 0.02).unwrap()
    }

    #[test]
    fn ground_truth_frames_are_consistent_up_to_interpolation() {
        use crate::scene_io::{Material, Primitive, SceneSpec};
        let base = SceneSpec { width: 48, height: 48, focal: 45.0, ..SceneSpec::default() };
        // one smoothly shaded sphere: bilinear interpolation is the only error
        let sphere = SceneSpec {
            primitives: vec![Primitive::Sphere { center: [0.0, -0.4, 0.0], radius: 0.6, material: Material::Flat { color: [0.8, 0.5, 0.3] } }],
            ..base.clone()
        };
        let rep = ground_truth_consistency(&sphere);
        assert!(rep.mean_mse < 1e-6, "{rep:?}");
        assert!(rep.pair_valid_pixels.iter().all(|&n| n > 200));

        // flat materials on the full layout add shading creases between faces
        let mut flat = base.clone();
        for p in &mut flat.primitives {
            let m = match p {
                Primitive::Sphere { material, .. } | Primitive::Cuboid { material, .. } | Primitive::Room { material, .. } => material,
            };
            *m = Material::Flat { color: m.albedo([0.0; 3]) };
        }
        let creased = ground_truth_consistency(&flat).mean_mse;
        let textured = ground_truth_consistency(&base).mean_mse;
        assert!(creased < 1e-3 && creased < textured, "{creased} {textured}");
    }
}
