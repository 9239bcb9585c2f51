//! Analytic ray-traced scenes used as ground truth.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, CameraPose, DepthMap, PosedImage, Ray, SceneBounds, SceneDataset};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case", deny_unknown_fields)]
pub enum Material {
    Flat { color: [f64; 3] },
    /// 3D checkerboard with cells of side `1 / frequency`.
    Checker { color: [f64; 3], alt: [f64; 3], frequency: f64 },
    /// Bands along world `axis`.
    Stripes { color: [f64; 3], alt: [f64; 3], frequency: f64, axis: usize },
}

impl Material {
    pub fn albedo(&self, p: Vec3) -> [f64; 3] {
        // the quarter-cell offset keeps axis-aligned faces at integer
        // coordinates away from cell boundaries
        let cell = |v: f64, f: f64| (v * f + 0.25).floor() as i64;
        match *self {
            Material::Flat { color } => color,
            Material::Checker { color, alt, frequency } => {
                let s = cell(p[0], frequency) + cell(p[1], frequency) + cell(p[2], frequency);
                if s.rem_euclid(2) == 0 {
                    color
                } else {
                    alt
                }
            }
            Material::Stripes { color, alt, frequency, axis } => {
                if cell(p[axis.min(2)], frequency).rem_euclid(2) == 0 {
                    color
                } else {
                    alt
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        let ok = match self {
            Material::Flat { color } => in_unit(color),
            Material::Checker { color, alt, frequency } => in_unit(color) && in_unit(alt) && *frequency > 0.0,
            Material::Stripes { color, alt, frequency, axis } => {
                in_unit(color) && in_unit(alt) && *frequency > 0.0 && *axis < 3
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad material {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64, material: Material },
    /// Solid axis-aligned box.
    Cuboid { min: Vec3, max: Vec3, material: Material },
    /// Axis-aligned box seen from the inside (walls, floor, ceiling).
    Room { min: Vec3, max: Vec3, material: Material },
}

impl Primitive {
    pub fn material(&self) -> &Material {
        match self {
            Primitive::Sphere { material, .. } | Primitive::Cuboid { material, .. } | Primitive::Room { material, .. } => {
                material
            }
        }
    }

    /// Nearest hit with `t > t_min`, normal facing the ray.
    pub fn intersect(&self, ray: &Ray, t_min: f64) -> Option<(f64, Vec3)> {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = geometry::sub(ray.origin, center);
                let b = geometry::dot(oc, ray.direction);
                let c = geometry::dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [-b - sq, -b + sq].into_iter().find(|&t| t > t_min)?;
                let n = geometry::scale(geometry::sub(ray.at(t), center), 1.0 / radius);
                Some((t, facing(n, ray.direction)))
            }
            Primitive::Cuboid { min, max, .. } | Primitive::Room { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut ax0, mut ax1) = (0, 0);
                for a in 0..3 {
                    let inv = 1.0 / ray.direction[a];
                    let (mut lo, mut hi) = ((min[a] - ray.origin[a]) * inv, (max[a] - ray.origin[a]) * inv);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    if lo.is_nan() || hi.is_nan() {
                        // ray parallel to and exactly on a slab plane
                        return None;
                    }
                    if lo > t0 {
                        t0 = lo;
                        ax0 = a;
                    }
                    if hi < t1 {
                        t1 = hi;
                        ax1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > t_min {
                    (t0, ax0)
                } else if t1 > t_min {
                    (t1, ax1)
                } else {
                    return None;
                };
                let mut n = [0.0; 3];
                n[axis] = 1.0;
                Some((t, facing(n, ray.direction)))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        self.material().validate()?;
        let ok = match self {
            Primitive::Sphere { radius, center, .. } => *radius > 0.0 && center.iter().all(|v| v.is_finite()),
            Primitive::Cuboid { min, max, .. } | Primitive::Room { min, max, .. } => (0..3).all(|a| min[a] < max[a]),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate primitive {self:?}")))
        }
    }
}

fn facing(n: Vec3, d: Vec3) -> Vec3 {
    if geometry::dot(n, d) > 0.0 {
        geometry::scale(n, -1.0)
    } else {
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightSpec {
    /// Direction towards the light.
    pub direction: Vec3,
    /// Ambient fraction; 1 gives flat, unshaded albedo.
    pub ambient: f64,
}

/// Cameras on a horizontal circle looking at a common target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub count: usize,
    pub center: Vec3,
    pub radius: f64,
    /// Camera height above `center` (world +y is up).
    pub height: f64,
    /// Vertical offset of the look-at target relative to `center`.
    pub target_offset: f64,
    /// Angle of the first camera, in turns.
    pub phase: f64,
    /// Uniform jitter of radius and height per camera.
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub light: LightSpec,
    pub primitives: Vec<Primitive>,
    pub train_orbit: OrbitSpec,
    /// Offset path (shifted and tilted) for held-out views.
    pub test_orbit: OrbitSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let flat = |color| Material::Flat { color };
        SceneSpec {
            width: 64,
            height: 64,
            focal: 60.0,
            near: 0.05,
            far: 6.0,
            background: [0.5; 3],
            light: LightSpec { direction: [0.4, 1.0, 0.3], ambient: 0.45 },
            primitives: vec![
                Primitive::Room {
                    min: [-2.0, -1.0, -2.0],
                    max: [2.0, 1.25, 2.0],
                    material: Material::Stripes {
                        color: [0.85, 0.8, 0.7],
                        alt: [0.55, 0.5, 0.45],
                        frequency: 2.0,
                        axis: 1,
                    },
                },
                Primitive::Cuboid {
                    min: [-2.0, -1.0, -2.0],
                    max: [2.0, -0.99, 2.0],
                    material: Material::Checker { color: [0.9, 0.9, 0.85], alt: [0.2, 0.25, 0.3], frequency: 2.0 },
                },
                Primitive::Sphere {
                    center: [0.0, -0.4, 0.0],
                    radius: 0.55,
                    material: Material::Checker { color: [0.85, 0.25, 0.2], alt: [0.95, 0.85, 0.3], frequency: 4.0 },
                },
                Primitive::Cuboid { min: [0.5, -1.0, -0.95], max: [0.95, -0.2, -0.5], material: flat([0.2, 0.35, 0.8]) },
                Primitive::Sphere { center: [-0.8, -0.7, 0.7], radius: 0.3, material: flat([0.3, 0.75, 0.35]) },
                Primitive::Cuboid {
                    min: [-0.6, -1.0, -1.2],
                    max: [-0.2, -0.6, -0.8],
                    material: Material::Stripes { color: [0.95, 0.95, 0.95], alt: [0.1, 0.1, 0.1], frequency: 8.0, axis: 0 },
                },
            ],
            train_orbit: OrbitSpec {
                count: 30,
                center: [0.0, -0.4, 0.0],
                radius: 1.7,
                height: 0.45,
                target_offset: 0.0,
                phase: 0.0,
                jitter: 0.05,
            },
            test_orbit: OrbitSpec {
                count: 5,
                center: [0.0, -0.4, 0.0],
                radius: 1.45,
                height: 0.75,
                target_offset: -0.2,
                phase: 0.05,
                jitter: 0.0,
            },
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::invalid(format!("degenerate focal length {}", self.focal)));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::invalid("scene bounds need 0 <= near < far"));
        }
        if self.train_orbit.count == 0 || self.test_orbit.count == 0 {
            return Err(Error::invalid("need at least one train and one test camera"));
        }
        if !(0.0..=1.0).contains(&self.light.ambient) || geometry::norm(self.light.direction) == 0.0 {
            return Err(Error::invalid("light needs ambient in [0, 1] and a non-zero direction"));
        }
        if !self.background.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("background color outside [0, 1]"));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }

    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let albedo = self.primitives[hit.primitive].material().albedo(hit.point);
        let l = geometry::normalize(self.light.direction);
        let k = self.light.ambient + (1.0 - self.light.ambient) * geometry::dot(hit.normal, l).max(0.0);
        albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub primitive: usize,
}

/// Closest intersection over all primitives.
pub fn intersect_scene(spec: &SceneSpec, ray: &Ray) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in spec.primitives.iter().enumerate() {
        if let Some((t, normal)) = p.intersect(ray, 1e-9) {
            if best.map_or(true, |b| t < b.t) {
                best = Some(Hit { t, point: ray.at(t), normal, primitive: i });
            }
        }
    }
    best
}

/// Color and along-ray depth at every pixel center. Misses take the
/// background color and depth `far`.
pub fn render_view(spec: &SceneSpec, intrinsics: &CameraIntrinsics, pose: &CameraPose) -> (Image, DepthMap) {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut depth = Vec::with_capacity(w * h);
    let mut data = Vec::with_capacity(w * h * 3);
    for r in 0..h {
        for c in 0..w {
            let ray = super::generate_ray(intrinsics, pose, (r as f64 + 0.5, c as f64 + 0.5)).expect("pixel center");
            match intersect_scene(spec, &ray) {
                Some(hit) => {
                    data.extend_from_slice(&spec.shade(&hit));
                    depth.push(hit.t);
                }
                None => {
                    data.extend_from_slice(&spec.background);
                    depth.push(spec.far);
                }
            }
        }
    }
    (Image::new(w, h, data).expect("sized"), DepthMap { width: w, height: h, data: depth })
}

fn orbit_poses(orbit: &OrbitSpec, rng: &mut Rng) -> Result<Vec<CameraPose>> {
    (0..orbit.count)
        .map(|i| {
            let angle = std::f64::consts::TAU * (orbit.phase + i as f64 / orbit.count as f64);
            let (dr, dh) = if orbit.jitter > 0.0 {
                (rng.gen_range(-orbit.jitter..orbit.jitter), rng.gen_range(-orbit.jitter..orbit.jitter))
            } else {
                (0.0, 0.0)
            };
            let r = orbit.radius + dr;
            let eye = [
                orbit.center[0] + r * angle.cos(),
                orbit.center[1] + orbit.height + dh,
                orbit.center[2] + r * angle.sin(),
            ];
            let target = geometry::add(orbit.center, [0.0, orbit.target_offset, 0.0]);
            CameraPose::look_at(eye, target, [0.0, 1.0, 0.0])
        })
        .collect()
}

/// `frames` poses on `orbit` spread over `turns` of a revolution from its
/// phase, without jitter: a smooth camera path.
pub fn orbit_arc(orbit: &OrbitSpec, frames: usize, turns: f64) -> Result<Vec<CameraPose>> {
    if frames == 0 || !turns.is_finite() {
        return Err(Error::invalid("camera path needs at least one frame and a finite arc"));
    }
    (0..frames)
        .map(|i| {
            let angle = std::f64::consts::TAU * (orbit.phase + turns * i as f64 / frames as f64);
            let eye = [
                orbit.center[0] + orbit.radius * angle.cos(),
                orbit.center[1] + orbit.height,
                orbit.center[2] + orbit.radius * angle.sin(),
            ];
            let target = geometry::add(orbit.center, [0.0, orbit.target_offset, 0.0]);
            CameraPose::look_at(eye, target, [0.0, 1.0, 0.0])
        })
        .collect()
}

/// Render train and test views of an analytic scene with exact depth.
pub fn make_synthetic_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<SceneDataset> {
    spec.validate()?;
    let k = spec.intrinsics()?;
    let view = |pose: CameraPose| {
        let (pixels, depth) = render_view(spec, &k, &pose);
        PosedImage { pixels, intrinsics: k, pose, depth: Some(depth) }
    };
    let train = orbit_poses(&spec.train_orbit, rng)?.into_iter().map(view).collect();
    let test = orbit_poses(&spec.test_orbit, rng)?.into_iter().map(view).collect();
    SceneDataset::new(train, test, SceneBounds { near: spec.near, far: spec.far })
}
