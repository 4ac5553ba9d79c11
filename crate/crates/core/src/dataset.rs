//! Procedural multiscale dataset: an analytic raytraced scene, camera rigs,
//! and the multiscale construction (box downsampling with adjusted
//! intrinsics and footprint-area loss weights).
//!
//! Ground truth is generated from source rather than shipped as assets; the
//! default "three-spheres" scene is a trio of lambertian spheres over a
//! checkered quad, supersampled per pixel so that downsampled ground truth is
//! itself anti-aliased.

use crate::vecmath::{Pose, Vec3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("image dimensions {w}x{h} not divisible by factor {factor}")]
    NotDivisible { w: u32, h: u32, factor: u32 },
    #[error("image and camera counts differ: {images} vs {cameras}")]
    CountMismatch { images: usize, cameras: usize },
    #[error("degenerate camera: {0}")]
    BadCamera(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad float image file {0}")]
    BadFloatImage(String),
}

/// Pinhole camera. `focal` is in pixels; `near`/`far` bound the rendered
/// depth range along each ray.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: Pose,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Horizontal field of view in radians.
    pub fn angle_x(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.focal).atan()
    }

    /// Camera with intrinsics divided by `factor` (same field of view at a
    /// lower resolution).
    pub fn downscaled(&self, factor: u32) -> Camera {
        Camera {
            pose: self.pose,
            focal: self.focal / factor as f64,
            width: self.width / factor,
            height: self.height / factor,
            near: self.near,
            far: self.far,
        }
    }
}

/// Interleaved-RGB float image in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF32 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(width: u32, height: u32) -> Self {
        ImageF32 { width, height, data: vec![0.0; (width * height * 3) as usize] }
    }

    #[inline]
    pub fn pixel(&self, row: u32, col: u32) -> [f32; 3] {
        let i = ((row * self.width + col) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: u32, col: u32, rgb: [f32; 3]) {
        let i = ((row * self.width + col) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: u32, height: u32, bytes: &[u8]) -> Self {
        ImageF32 {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DatasetError> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.to_u8())
            .expect("buffer size matches dimensions");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, DatasetError> {
        let img = image::open(path)?.to_rgb8();
        Ok(ImageF32::from_u8(img.width(), img.height(), img.as_raw()))
    }

    /// Raw float sidecar: magic, dimensions, then f32 little-endian samples.
    pub fn save_f32(&self, path: &Path) -> Result<(), DatasetError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"CFIM")?;
        f.write_all(&self.width.to_le_bytes())?;
        f.write_all(&self.height.to_le_bytes())?;
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_f32(path: &Path) -> Result<Self, DatasetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || DatasetError::BadFloatImage(path.display().to_string());
        if bytes.len() < 12 || &bytes[..4] != b"CFIM" {
            return Err(bad());
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let expected = (width * height * 3) as usize * 4 + 12;
        if bytes.len() != expected {
            return Err(bad());
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ImageF32 { width, height, data })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// Finite checkered rectangle spanned by `edge_u` x `edge_v` from `origin`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckerQuad {
    pub origin: Vec3,
    pub edge_u: Vec3,
    pub edge_v: Vec3,
    /// Checker cell size as a fraction of the (u, v) edge lengths.
    pub cell: f64,
    pub albedo_a: [f64; 3],
    pub albedo_b: [f64; 3],
}

/// Analytic scene: lambertian spheres plus an optional checkered quad under a
/// fixed directional light. Everything intersects in closed form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub spheres: Vec<Sphere>,
    pub quad: Option<CheckerQuad>,
    pub background: [f64; 3],
    /// Direction pointing toward the light.
    pub light_dir: Vec3,
    pub ambient: f64,
}

struct Hit {
    t: f64,
    normal: Vec3,
    albedo: [f64; 3],
}

fn intersect_sphere(o: Vec3, d: Vec3, s: &Sphere) -> Option<(f64, Vec3)> {
    let oc = o - s.center;
    let a = d.norm_squared();
    let half_b = oc.dot(d);
    let c = oc.norm_squared() - s.radius * s.radius;
    let disc = half_b * half_b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let mut t = (-half_b - sq) / a;
    if t <= 1e-9 {
        t = (-half_b + sq) / a;
    }
    if t <= 1e-9 {
        return None;
    }
    let n = (o + d * t - s.center).normalized();
    Some((t, n))
}

fn intersect_quad(o: Vec3, d: Vec3, q: &CheckerQuad) -> Option<(f64, Vec3, [f64; 3])> {
    let n = q.edge_u.cross(q.edge_v);
    let denom = d.dot(n);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (q.origin - o).dot(n) / denom;
    if t <= 1e-9 {
        return None;
    }
    let p = o + d * t - q.origin;
    let u = p.dot(q.edge_u) / q.edge_u.norm_squared();
    let v = p.dot(q.edge_v) / q.edge_v.norm_squared();
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return None;
    }
    let parity = ((u / q.cell).floor() + (v / q.cell).floor()) as i64 & 1;
    let albedo = if parity == 0 { q.albedo_a } else { q.albedo_b };
    let normal = if denom > 0.0 { -n.normalized() } else { n.normalized() };
    Some((t, normal, albedo))
}

impl SceneSpec {
    /// Shade the first intersection of `o + t d`, or the background color.
    pub fn shade(&self, o: Vec3, d: Vec3) -> [f64; 3] {
        let mut best: Option<Hit> = None;
        for s in &self.spheres {
            if let Some((t, normal)) = intersect_sphere(o, d, s) {
                if best.as_ref().map_or(true, |h| t < h.t) {
                    best = Some(Hit { t, normal, albedo: s.albedo });
                }
            }
        }
        if let Some(q) = &self.quad {
            if let Some((t, normal, albedo)) = intersect_quad(o, d, q) {
                if best.as_ref().map_or(true, |h| t < h.t) {
                    best = Some(Hit { t, normal, albedo });
                }
            }
        }
        match best {
            None => self.background,
            Some(h) => {
                let l = self.light_dir.normalized();
                let diffuse = h.normal.dot(l).max(0.0);
                let shade = self.ambient + (1.0 - self.ambient) * diffuse;
                [h.albedo[0] * shade, h.albedo[1] * shade, h.albedo[2] * shade]
            }
        }
    }
}

/// Default scene, parameterized by a global world scale so the same content
/// can be emitted at any coordinate magnitude.
pub fn three_spheres_scene(world_scale: f64) -> SceneSpec {
    let s = world_scale;
    SceneSpec {
        spheres: vec![
            Sphere {
                center: Vec3::new(-0.45 * s, 0.08 * s, 0.05 * s),
                radius: 0.30 * s,
                albedo: [0.85, 0.25, 0.20],
            },
            Sphere {
                center: Vec3::new(0.42 * s, 0.02 * s, -0.25 * s),
                radius: 0.24 * s,
                albedo: [0.20, 0.45, 0.85],
            },
            Sphere {
                center: Vec3::new(0.05 * s, -0.05 * s, 0.42 * s),
                radius: 0.18 * s,
                albedo: [0.95, 0.80, 0.25],
            },
        ],
        quad: Some(CheckerQuad {
            origin: Vec3::new(-1.1 * s, -0.36 * s, -1.1 * s),
            edge_u: Vec3::new(2.2 * s, 0.0, 0.0),
            edge_v: Vec3::new(0.0, 0.0, 2.2 * s),
            cell: 1.0 / 28.0,
            albedo_a: [0.92, 0.92, 0.92],
            albedo_b: [0.12, 0.12, 0.12],
        }),
        background: [1.0, 1.0, 1.0],
        light_dir: Vec3::new(0.35, 1.0, 0.25),
        ambient: 0.35,
    }
}

/// Deterministic rig of cameras on a sphere looking at the origin.
///
/// Azimuths advance by the golden angle from `phase`; elevations cycle
/// through a small fixed set, giving stable but non-degenerate coverage.
pub fn camera_rig(
    count: usize,
    ring_radius: f64,
    fov_x: f64,
    width: u32,
    height: u32,
    near: f64,
    far: f64,
    phase: f64,
) -> Vec<Camera> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let elevations = [0.30f64, 0.55, 0.42, 0.68];
    let focal = 0.5 * width as f64 / (0.5 * fov_x).tan();
    (0..count)
        .map(|i| {
            let azim = phase + golden * i as f64;
            let elev = elevations[i % elevations.len()];
            let eye = Vec3::new(
                ring_radius * elev.cos() * azim.cos(),
                ring_radius * elev.sin(),
                ring_radius * elev.cos() * azim.sin(),
            );
            Camera {
                pose: Pose::look_at(eye, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0)),
                focal,
                width,
                height,
                near,
                far,
            }
        })
        .collect()
}

/// Render the analytic ground truth for one camera.
///
/// Each pixel averages a `grid x grid` lattice of sub-pixel rays (box
/// filtering), so the image is anti-aliased at the pixel sampling rate.
pub fn generate_scene(spec: &SceneSpec, camera: &Camera, grid: u32) -> Result<ImageF32, DatasetError> {
    if camera.focal <= 0.0 || camera.width == 0 || camera.height == 0 {
        return Err(DatasetError::BadCamera(format!(
            "focal={} size={}x{}",
            camera.focal, camera.width, camera.height
        )));
    }
    let w = camera.width;
    let h = camera.height;
    let origin = camera.pose.translation;
    let inv = 1.0 / grid as f64;
    let mut img = ImageF32::new(w, h);
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut out = vec![0.0f32; (w * 3) as usize];
            for col in 0..w {
                let mut acc = [0.0f64; 3];
                for a in 0..grid {
                    for b in 0..grid {
                        let dx = (a as f64 + 0.5) * inv;
                        let dy = (b as f64 + 0.5) * inv;
                        let x = (col as f64 + dx - 0.5 * w as f64) / camera.focal;
                        let y = -((row as f64 + dy) - 0.5 * h as f64) / camera.focal;
                        let dir = camera.pose.transform_direction(Vec3::new(x, y, -1.0));
                        let c = spec.shade(origin, dir);
                        acc[0] += c[0];
                        acc[1] += c[1];
                        acc[2] += c[2];
                    }
                }
                let n = (grid * grid) as f64;
                for k in 0..3 {
                    out[(col * 3 + k as u32) as usize] = (acc[k] / n) as f32;
                }
            }
            out
        })
        .collect();
    for (row, data) in rows.into_iter().enumerate() {
        let base = row * (w * 3) as usize;
        img.data[base..base + data.len()].copy_from_slice(&data);
    }
    Ok(img)
}

/// Exact block mean downsampling. Each output pixel is the mean of the
/// `factor x factor` input block, accumulated in f64.
pub fn box_downsample(img: &ImageF32, factor: u32) -> Result<ImageF32, DatasetError> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(DatasetError::NotDivisible { w: img.width, h: img.height, factor });
    }
    let ow = img.width / factor;
    let oh = img.height / factor;
    let mut out = ImageF32::new(ow, oh);
    let norm = 1.0 / (factor * factor) as f64;
    for row in 0..oh {
        for col in 0..ow {
            let mut acc = [0.0f64; 3];
            for dr in 0..factor {
                for dc in 0..factor {
                    let p = img.pixel(row * factor + dr, col * factor + dc);
                    acc[0] += p[0] as f64;
                    acc[1] += p[1] as f64;
                    acc[2] += p[2] as f64;
                }
            }
            out.set_pixel(row, col, [
                (acc[0] * norm) as f32,
                (acc[1] * norm) as f32,
                (acc[2] * norm) as f32,
            ]);
        }
    }
    Ok(out)
}

/// One resolution level of a multiscale dataset.
#[derive(Clone, Debug)]
pub struct ScaleLevel {
    pub factor: u32,
    pub images: Vec<ImageF32>,
    pub cameras: Vec<Camera>,
    /// Footprint-area loss weight: factor squared.
    pub loss_weight: f64,
}

/// Images at scale factors {1, 2, 4, 8} with per-scale cameras and
/// footprint-area loss weights.
#[derive(Clone, Debug)]
pub struct MultiscaleDataset {
    pub levels: Vec<ScaleLevel>,
}

pub const DEFAULT_SCALE_FACTORS: [u32; 4] = [1, 2, 4, 8];

impl MultiscaleDataset {
    pub fn total_pixels(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.images.iter().map(|im| (im.width * im.height) as usize).sum::<usize>())
            .sum()
    }

    /// Resolve a flat pixel index to (level, image, row, col).
    pub fn locate(&self, mut idx: usize) -> (usize, usize, u32, u32) {
        for (li, level) in self.levels.iter().enumerate() {
            for (ii, im) in level.images.iter().enumerate() {
                let n = (im.width * im.height) as usize;
                if idx < n {
                    return (li, ii, idx as u32 / im.width, idx as u32 % im.width);
                }
                idx -= n;
            }
        }
        panic!("pixel index out of range");
    }
}

/// Assemble the multiscale dataset from full-resolution images: each level is
/// the exact box downsample of the originals with intrinsics divided by the
/// same factor and loss weight equal to the squared factor.
pub fn build_multiscale(
    images: &[ImageF32],
    cameras: &[Camera],
    factors: &[u32],
) -> Result<MultiscaleDataset, DatasetError> {
    if images.len() != cameras.len() {
        return Err(DatasetError::CountMismatch { images: images.len(), cameras: cameras.len() });
    }
    let mut levels = Vec::with_capacity(factors.len());
    for &factor in factors {
        let mut imgs = Vec::with_capacity(images.len());
        let mut cams = Vec::with_capacity(cameras.len());
        for (img, cam) in images.iter().zip(cameras.iter()) {
            let scaled = if factor == 1 { img.clone() } else { box_downsample(img, factor)? };
            imgs.push(scaled);
            cams.push(cam.downscaled(factor));
        }
        levels.push(ScaleLevel {
            factor,
            images: imgs,
            cameras: cams,
            loss_weight: (factor * factor) as f64,
        });
    }
    Ok(MultiscaleDataset { levels })
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

#[derive(Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<FrameEntry>,
}

/// Write one split (train/test) to disk: per-scale PNGs plus float sidecars
/// under `dir/<split>/`, and a Blender-convention `transforms_<split>.json`.
pub fn write_split(
    dir: &Path,
    split: &str,
    dataset: &MultiscaleDataset,
) -> Result<(), DatasetError> {
    let sub = dir.join(split);
    std::fs::create_dir_all(&sub)?;
    let full = &dataset.levels[0];
    let frames = full
        .cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| FrameEntry {
            file_path: format!("./{split}/r_{i}"),
            transform_matrix: cam.pose.to_matrix4(),
        })
        .collect();
    let tf = TransformsFile {
        camera_angle_x: full.cameras.first().map(|c| c.angle_x()).unwrap_or(0.0),
        frames,
    };
    let json = serde_json::to_string_pretty(&tf)?;
    std::fs::write(dir.join(format!("transforms_{split}.json")), json)?;
    for level in &dataset.levels {
        for (i, img) in level.images.iter().enumerate() {
            let base = sub.join(format!("r_{i}_s{}", level.factor));
            img.save_png(&base.with_extension("png"))?;
            img.save_f32(&base.with_extension("f32"))?;
        }
    }
    Ok(())
}

/// Load one split back into a multiscale dataset.
///
/// Reads images through the 8-bit PNG decode path (the same path external
/// data takes). Frames whose `file_path` has no `_s<scale>` sibling fall back
/// to plain `<file_path>.png` at full resolution — this lets standard
/// single-scale captures load unchanged — and the missing scales are derived
/// by box downsampling.
pub fn load_split(
    dir: &Path,
    split: &str,
    factors: &[u32],
    near: f64,
    far: f64,
) -> Result<MultiscaleDataset, DatasetError> {
    let tf: TransformsFile =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("transforms_{split}.json")))?)?;
    let mut full_images = Vec::new();
    let mut full_cams = Vec::new();
    let mut per_scale: Vec<Vec<Option<ImageF32>>> = vec![Vec::new(); factors.len()];
    for frame in &tf.frames {
        let base = dir.join(frame.file_path.trim_start_matches("./"));
        let full_path = {
            let scaled = base.with_file_name(format!(
                "{}_s1.png",
                base.file_name().unwrap().to_string_lossy()
            ));
            if scaled.exists() {
                scaled
            } else {
                base.with_extension("png")
            }
        };
        let full = ImageF32::load_png(&full_path)?;
        let focal = 0.5 * full.width as f64 / (0.5 * tf.camera_angle_x).tan();
        full_cams.push(Camera {
            pose: Pose::from_matrix4(&frame.transform_matrix),
            focal,
            width: full.width,
            height: full.height,
            near,
            far,
        });
        for (fi, &factor) in factors.iter().enumerate() {
            if factor == 1 {
                per_scale[fi].push(None);
                continue;
            }
            let p = base.with_file_name(format!(
                "{}_s{}.png",
                base.file_name().unwrap().to_string_lossy(),
                factor
            ));
            per_scale[fi].push(if p.exists() { Some(ImageF32::load_png(&p)?) } else { None });
        }
        full_images.push(full);
    }
    let mut ds = build_multiscale(&full_images, &full_cams, factors)?;
    // Prefer on-disk per-scale images where they exist: they went through the
    // same quantize/decode path as the full-resolution ones.
    for (fi, level) in ds.levels.iter_mut().enumerate() {
        for (ii, slot) in per_scale[fi].iter_mut().enumerate() {
            if let Some(img) = slot.take() {
                level.images[ii] = img;
            }
        }
    }
    Ok(ds)
}
