//! Posed image datasets, ray generation and the patch/ray samplers.
//!
//! Pixel convention: `(row, col)` addressing, pixel centers at integer + 0.5.
//! Cameras look down their local +z axis with +x to the right (columns) and
//! +y down (rows). Poses map camera coordinates to world coordinates.

mod disk;
mod synthetic;

pub use disk::{
    camera_record, decode_cameras, decode_depth, decode_split, encode_depth, load_dataset, record_camera, save_dataset,
    CameraRecord, CamerasFile, SplitFile,
};
pub use synthetic::{
    intersect_scene, make_synthetic_scene, orbit_arc, render_view, Hit, LightSpec, Material, OrbitSpec, Primitive, SceneSpec,
};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point, square pixels.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate camera intrinsics {self:?}")))
        }
    }

    /// Camera-space point to continuous `(row, col)`; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        if p[2] <= 1e-12 {
            return None;
        }
        Some((self.fy * p[1] / p[2] + self.cy, self.fx * p[0] / p[2] + self.cx))
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= 0.0 && col >= 0.0 && row < self.height as f64 && col < self.width as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Camera-to-world rotation.
    pub rotation: Mat3,
    /// Camera origin in world coordinates.
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose { rotation: geometry::IDENTITY, translation: [0.0; 3] }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let p = CameraPose { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if geometry::orthonormality_error(&self.rotation) >= 1e-6 || geometry::det(&self.rotation) <= 0.0 {
            return Err(Error::invalid("pose rotation is not a proper rotation"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = geometry::normalize(geometry::sub(target, eye));
        let right = geometry::cross(forward, up);
        if geometry::norm(right) < 1e-9 {
            return Err(Error::invalid("look_at: up is parallel to the viewing direction"));
        }
        let right = geometry::normalize(right);
        // image rows grow downwards
        let down = geometry::cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::new(rotation, eye)
    }

    pub fn to_world(&self, p_cam: Vec3) -> Vec3 {
        geometry::add(geometry::mat_vec(&self.rotation, p_cam), self.translation)
    }

    pub fn to_camera(&self, p_world: Vec3) -> Vec3 {
        geometry::mat_t_vec(&self.rotation, geometry::sub(p_world, self.translation))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        geometry::add(self.origin, geometry::scale(self.direction, t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedImage {
    pub pixels: Image,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    /// Distance along the unit ray to the first surface, per pixel.
    pub depth: Option<DepthMap>,
}

impl PosedImage {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        if self.pixels.width() != self.intrinsics.width || self.pixels.height() != self.intrinsics.height {
            return Err(Error::shape("image size disagrees with intrinsics"));
        }
        if !self.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel colors outside [0, 1]"));
        }
        if let Some(d) = &self.depth {
            if d.width != self.intrinsics.width || d.height != self.intrinsics.height {
                return Err(Error::shape("depth size disagrees with intrinsics"));
            }
            if !d.data.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(Error::invalid("depth must be strictly positive"));
            }
        }
        Ok(())
    }

    /// Ray through the center of integer pixel `(row, col)`.
    pub fn pixel_ray(&self, row: usize, col: usize) -> Ray {
        generate_ray(&self.intrinsics, &self.pose, (row as f64 + 0.5, col as f64 + 0.5))
            .expect("pixel centers are in bounds")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub train_images: Vec<PosedImage>,
    pub test_images: Vec<PosedImage>,
    pub bounds: SceneBounds,
}

impl SceneDataset {
    pub fn new(train_images: Vec<PosedImage>, test_images: Vec<PosedImage>, bounds: SceneBounds) -> Result<Self> {
        let ds = SceneDataset { train_images, test_images, bounds };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_images.is_empty() {
            return Err(Error::invalid("dataset needs at least one training image"));
        }
        if !(self.bounds.near >= 0.0 && self.bounds.near < self.bounds.far) {
            return Err(Error::invalid("scene bounds need 0 <= near < far"));
        }
        for im in self.train_images.iter().chain(&self.test_images) {
            im.validate()?;
        }
        for t in &self.test_images {
            if self.train_images.iter().any(|tr| tr.pose == t.pose && tr.pixels == t.pixels) {
                return Err(Error::invalid("train and test sets overlap"));
            }
        }
        Ok(())
    }
}

/// A square grid of rays of one training image with its ground-truth colors.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// Row-major `size * size` rays.
    pub rays: Vec<Ray>,
    pub colors: Image,
    pub source_image_index: usize,
    pub pixel_origin: (usize, usize),
}

impl PatchSample {
    pub fn size(&self) -> usize {
        self.colors.width()
    }

    pub fn ray(&self, row: usize, col: usize) -> &Ray {
        &self.rays[row * self.size() + col]
    }

    /// The `size x size` patch of `image` with top-left pixel `(row, col)`.
    pub fn from_image(image: &PosedImage, index: usize, row: usize, col: usize, size: usize) -> Result<Self> {
        let colors = image.pixels.crop(row, col, size, size)?;
        let mut rays = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                rays.push(image.pixel_ray(row + r, col + c));
            }
        }
        Ok(PatchSample { rays, colors, source_image_index: index, pixel_origin: (row, col) })
    }

    fn sub_patch(&self, row: usize, col: usize, size: usize) -> Result<PatchSample> {
        let colors = self.colors.crop(row, col, size, size)?;
        let mut rays = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                rays.push(*self.ray(row + r, col + c));
            }
        }
        Ok(PatchSample {
            rays,
            colors,
            source_image_index: self.source_image_index,
            pixel_origin: (self.pixel_origin.0 + row, self.pixel_origin.1 + col),
        })
    }
}

/// World-space ray through continuous pixel coordinates `(row, col)`.
pub fn generate_ray(intrinsics: &CameraIntrinsics, pose: &CameraPose, pixel: (f64, f64)) -> Result<Ray> {
    let (row, col) = pixel;
    if !intrinsics.contains(row, col) {
        return Err(Error::OutOfBounds(format!(
            "pixel ({row}, {col}) outside {}x{} image",
            intrinsics.height, intrinsics.width
        )));
    }
    let d_cam = [(col - intrinsics.cx) / intrinsics.fx, (row - intrinsics.cy) / intrinsics.fy, 1.0];
    let direction = geometry::normalize(geometry::mat_vec(&pose.rotation, d_cam));
    Ok(Ray { origin: pose.translation, direction })
}

/// `count` ray/color pairs drawn uniformly over every pixel of every
/// training image.
pub fn sample_ray_batch(dataset: &SceneDataset, count: usize, rng: &mut Rng) -> Result<Vec<(Ray, [f64; 3])>> {
    if dataset.train_images.is_empty() {
        return Err(Error::invalid("no training images to sample rays from"));
    }
    if count == 0 {
        return Err(Error::invalid("ray batch must be positive"));
    }
    let sizes: Vec<usize> = dataset.train_images.iter().map(|im| im.pixels.width() * im.pixels.height()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut k = rng.gen_range(0..total);
        let mut img = 0;
        while k >= sizes[img] {
            k -= sizes[img];
            img += 1;
        }
        let im = &dataset.train_images[img];
        let (row, col) = (k / im.pixels.width(), k % im.pixels.width());
        out.push((im.pixel_ray(row, col), im.pixels.pixel(row, col)));
    }
    Ok(out)
}

/// A `size x size` patch at a uniformly random valid position of a
/// uniformly random training image.
pub fn sample_patch(dataset: &SceneDataset, size: usize, rng: &mut Rng) -> Result<PatchSample> {
    if size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if dataset.train_images.is_empty() {
        return Err(Error::invalid("no training images to sample patches from"));
    }
    for im in &dataset.train_images {
        if size > im.pixels.width() || size > im.pixels.height() {
            return Err(Error::OutOfBounds(format!(
                "patch size {size} exceeds a {}x{} training image",
                im.pixels.height(),
                im.pixels.width()
            )));
        }
    }
    let index = rng.gen_range(0..dataset.train_images.len());
    let im = &dataset.train_images[index];
    let row = rng.gen_range(0..=im.pixels.height() - size);
    let col = rng.gen_range(0..=im.pixels.width() - size);
    PatchSample::from_image(im, index, row, col, size)
}

/// Non-overlapping row-major tiling into `sub_size` patches.
pub fn subdivide_patch(patch: &PatchSample, sub_size: usize) -> Result<Vec<PatchSample>> {
    let size = patch.size();
    if sub_size == 0 || size % sub_size != 0 {
        return Err(Error::invalid(format!("sub-patch size {sub_size} does not divide {size}")));
    }
    let n = size / sub_size;
    let mut out = Vec::with_capacity(n * n);
    for by in 0..n {
        for bx in 0..n {
            out.push(patch.sub_patch(by * sub_size, bx * sub_size, sub_size)?);
        }
    }
    Ok(out)
}

/// Inverse of [`subdivide_patch`] on pixel data.
pub fn assemble_tiles(tiles: &[Image]) -> Result<Image> {
    let n = (tiles.len() as f64).sqrt().round() as usize;
    if n * n != tiles.len() || n == 0 {
        return Err(Error::invalid("tile count must be a non-zero square"));
    }
    let s = tiles[0].width();
    let mut out = Image::filled(n * s, n * s, [0.0; 3]);
    for (k, t) in tiles.iter().enumerate() {
        if t.width() != s || t.height() != s {
            return Err(Error::shape("tiles must be equal squares"));
        }
        let (by, bx) = (k / n, k % n);
        for r in 0..s {
            for c in 0..s {
                out.set_pixel(by * s + r, bx * s + c, t.pixel(r, c));
            }
        }
    }
    Ok(out)
}

/// `count` sub-patches at uniformly random positions (overlap allowed).
pub fn crop_random_subpatches(patch: &PatchSample, sub_size: usize, count: usize, rng: &mut Rng) -> Result<Vec<PatchSample>> {
    let size = patch.size();
    if sub_size == 0 || sub_size > size {
        return Err(Error::invalid(format!("sub-patch size {sub_size} exceeds patch size {size}")));
    }
    (0..count)
        .map(|_| {
            let row = rng.gen_range(0..=size - sub_size);
            let col = rng.gen_range(0..=size - sub_size);
            patch.sub_patch(row, col, sub_size)
        })
        .collect()
}

/// Gaussian perturbation of a pose: isotropic translation noise and a
/// rotation about a uniformly random axis by a Gaussian angle.
pub fn sample_perturbed_pose(pose: &CameraPose, translation_std: f64, rotation_std: f64, rng: &mut Rng) -> Result<CameraPose> {
    if !(translation_std.is_finite() && rotation_std.is_finite() && translation_std >= 0.0 && rotation_std >= 0.0) {
        return Err(Error::invalid("perturbation standard deviations must be finite and non-negative"));
    }
    let mut translation = pose.translation;
    if translation_std > 0.0 {
        let n = Normal::new(0.0, translation_std).expect("valid std");
        for v in &mut translation {
            *v += n.sample(rng);
        }
    }
    let mut rotation = pose.rotation;
    if rotation_std > 0.0 {
        let axis = loop {
            let a: Vec3 = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
            if geometry::norm(a) > 1e-9 {
                break geometry::normalize(a);
            }
        };
        let angle = Normal::new(0.0, rotation_std).expect("valid std").sample(rng);
        rotation = geometry::mat_mul(&pose.rotation, &geometry::axis_angle(axis, angle));
    }
    Ok(CameraPose { rotation, translation })
}
