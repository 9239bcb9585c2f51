//! On-disk dataset layout: `images/*.png` (16-bit), `depth/*.f32` (raw
//! little-endian), `cameras.json` and `split.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, CameraPose, DepthMap, PosedImage, SceneBounds, SceneDataset};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasFile {
    pub cameras: Vec<CameraRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Parse and validate `cameras.json` contents.
pub fn decode_cameras(text: &str) -> Result<CamerasFile> {
    let file: CamerasFile = serde_json::from_str(text).map_err(|e| Error::format("cameras.json", e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for c in &file.cameras {
        if !valid_name(&c.name) {
            return Err(Error::format("cameras.json", format!("bad camera name {:?}", c.name)));
        }
        if !seen.insert(c.name.as_str()) {
            return Err(Error::format("cameras.json", format!("duplicate camera {}", c.name)));
        }
        if c.width == 0 || c.height == 0 || c.width > 1 << 14 || c.height > 1 << 14 {
            return Err(Error::format("cameras.json", format!("bad image size for {}", c.name)));
        }
        CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?;
        record_pose(c)?;
        if !(c.near >= 0.0 && c.near < c.far && c.far.is_finite()) {
            return Err(Error::format("cameras.json", format!("bad near/far for {}", c.name)));
        }
    }
    Ok(file)
}

/// Parse and validate `split.json` contents.
pub fn decode_split(text: &str) -> Result<SplitFile> {
    let split: SplitFile = serde_json::from_str(text).map_err(|e| Error::format("split.json", e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for n in split.train.iter().chain(&split.test) {
        if !valid_name(n) {
            return Err(Error::format("split.json", format!("bad image name {n:?}")));
        }
        if !seen.insert(n.as_str()) {
            return Err(Error::format("split.json", format!("{n} listed twice")));
        }
    }
    Ok(split)
}

/// Raw little-endian f32 depth values.
pub fn decode_depth(bytes: &[u8], width: usize, height: usize) -> Result<DepthMap> {
    if bytes.len() != width * height * 4 {
        return Err(Error::format("depth", format!("{} bytes for a {width}x{height} map", bytes.len())));
    }
    let data: Vec<f64> =
        bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    if !data.iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(Error::format("depth", "depth values must be finite and positive"));
    }
    Ok(DepthMap { width, height, data })
}

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    depth.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn record_pose(c: &CameraRecord) -> Result<CameraPose> {
    let r = c.rotation;
    CameraPose::new([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]], c.translation)
}

/// Intrinsics, pose and bounds of a camera record.
pub fn record_camera(c: &CameraRecord) -> Result<(CameraIntrinsics, CameraPose, SceneBounds)> {
    let k = CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?;
    Ok((k, record_pose(c)?, SceneBounds { near: c.near, far: c.far }))
}

fn record_of(name: &str, im: &PosedImage, bounds: SceneBounds) -> CameraRecord {
    camera_record(name, &im.intrinsics, &im.pose, bounds)
}

pub fn camera_record(name: &str, k: &CameraIntrinsics, pose: &CameraPose, bounds: SceneBounds) -> CameraRecord {
    let k = *k;
    let r = pose.rotation;
    CameraRecord {
        name: name.to_string(),
        width: k.width,
        height: k.height,
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        rotation: [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]],
        translation: pose.translation,
        near: bounds.near,
        far: bounds.far,
    }
}

/// Write the dataset layout into `dir` (created if missing).
pub fn save_dataset(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    for sub in ["images", "depth"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut cameras = Vec::new();
    let mut split = SplitFile { train: vec![], test: vec![] };
    let groups = [("train", &dataset.train_images), ("test", &dataset.test_images)];
    for (tag, images) in groups {
        for (i, im) in images.iter().enumerate() {
            let name = format!("{tag}_{i:03}");
            im.pixels.save_png16(&dir.join("images").join(format!("{name}.png")))?;
            if let Some(d) = &im.depth {
                let p = dir.join("depth").join(format!("{name}.f32"));
                std::fs::write(&p, encode_depth(d)).map_err(|e| Error::io(&p, e))?;
            }
            cameras.push(record_of(&name, im, dataset.bounds));
            if tag == "train" { &mut split.train } else { &mut split.test }.push(name);
        }
    }
    let write_json = |file: &str, text: String| -> Result<()> {
        let p = dir.join(file);
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    };
    write_json("cameras.json", serde_json::to_string_pretty(&CamerasFile { cameras }).expect("serializable"))?;
    write_json("split.json", serde_json::to_string_pretty(&split).expect("serializable"))?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`] (or by hand in the same layout).
pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let cameras = decode_cameras(&read(&dir.join("cameras.json"))?)?;
    let split = decode_split(&read(&dir.join("split.json"))?)?;
    let by_name: BTreeMap<&str, &CameraRecord> = cameras.cameras.iter().map(|c| (c.name.as_str(), c)).collect();
    let mut bounds: Option<SceneBounds> = None;
    let mut load = |names: &[String]| -> Result<Vec<PosedImage>> {
        names
            .iter()
            .map(|name| {
                let c = by_name.get(name.as_str()).ok_or_else(|| Error::Missing(format!("camera record for {name}")))?;
                let b = SceneBounds { near: c.near, far: c.far };
                match bounds {
                    None => bounds = Some(b),
                    Some(prev) if prev != b => {
                        return Err(Error::format("cameras.json", "near/far differ between cameras"));
                    }
                    _ => {}
                }
                let pixels = Image::load_png(&dir.join("images").join(format!("{name}.png")))?;
                let depth_path = dir.join("depth").join(format!("{name}.f32"));
                let depth = if depth_path.exists() {
                    let bytes = std::fs::read(&depth_path).map_err(|e| Error::io(&depth_path, e))?;
                    Some(decode_depth(&bytes, c.width, c.height)?)
                } else {
                    None
                };
                Ok(PosedImage {
                    pixels,
                    intrinsics: CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?,
                    pose: record_pose(c)?,
                    depth,
                })
            })
            .collect()
    };
    let train = load(&split.train)?;
    let test = load(&split.test)?;
    let bounds = bounds.ok_or_else(|| Error::invalid("split.json lists no images"))?;
    SceneDataset::new(train, test, bounds)
}
