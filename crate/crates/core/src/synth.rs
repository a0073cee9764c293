//! Procedural multi-view scenes with exact ground-truth depth.
//!
//! The reference camera sits at the world origin looking down +z; sources
//! sit at lateral offsets and are verged toward a point on the reference
//! axis. Surfaces are Lambertian with a value-noise albedo evaluated at the
//! world point, so every view sees the same intensity for the same point.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{look_at_rotation, CameraParams};
use crate::grid::{DepthMap, Grid, Mask};
use crate::io::{read_camera, read_pfm, read_pnm, write_camera, write_pfm, write_ppm, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    FrontoParallel {
        depth: f64,
    },
    /// The plane `normal . X = offset` (world frame).
    Slanted {
        normal: [f64; 3],
        offset: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        /// Depth of a fronto-parallel plane behind the sphere.
        backdrop: Option<f64>,
    },
    /// A near plane covering world `x < split_x` in front of a full far plane.
    TwoPlane {
        near: f64,
        far: f64,
        split_x: f64,
    },
}

/// Wavelength of each noise octave in scene units, with its amplitude.
const OCTAVES: [(f64, f64); 4] = [(80.0, 1.0), (40.0, 0.8), (20.0, 0.6), (10.0, 0.4)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub geometry: Geometry,
    pub texture_seed: u64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// World-frame centers of the source cameras.
    pub source_offsets: Vec<[f64; 3]>,
    /// Depth on the reference axis the sources look at.
    pub verge_depth: f64,
    pub depth_range: (f64, f64),
}

impl SceneSpec {
    pub fn new(geometry: Geometry, texture_seed: u64, rig: &RigConfig) -> Self {
        Self {
            geometry,
            texture_seed,
            width: rig.width,
            height: rig.height,
            focal: rig.focal,
            source_offsets: rig.source_offsets(),
            verge_depth: rig.verge_depth,
            depth_range: rig.depth_range,
        }
    }

    pub fn cameras(&self) -> Result<Vec<CameraParams>> {
        let k = CameraParams::pinhole(
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
        );
        let mut cams = vec![CameraParams::new(k, Matrix3::identity(), Vector3::zeros())?];
        let target = Vector3::new(0.0, 0.0, self.verge_depth);
        for o in &self.source_offsets {
            let c = Vector3::from(*o);
            cams.push(CameraParams::from_center(
                k,
                look_at_rotation(&c, &target)?,
                c,
            )?);
        }
        Ok(cams)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::DegenerateGeometry(m.into()));
        if self.width == 0 || self.height == 0 || self.width % 4 != 0 || self.height % 4 != 0 {
            return Err(Error::BadDimensions {
                width: self.width,
                height: self.height,
            });
        }
        if !(self.focal > 0.0) {
            return bad("focal length must be positive");
        }
        let (lo, hi) = self.depth_range;
        if !(0.0 < lo && lo < hi) {
            return Err(Error::EmptyRange { low: lo, high: hi });
        }
        match self.geometry {
            Geometry::FrontoParallel { depth } if !(depth > 0.0) => bad("plane behind camera"),
            Geometry::Slanted { normal, .. } if Vector3::from(normal).norm() < 1e-12 => {
                bad("zero plane normal")
            }
            Geometry::Sphere { radius, .. } if !(radius > 0.0) => bad("non-positive sphere radius"),
            Geometry::Sphere { center, radius, .. } if Vector3::from(center).norm() <= radius => {
                bad("reference camera inside sphere")
            }
            Geometry::TwoPlane { near, far, .. } if !(0.0 < near && near < far) => {
                bad("near plane must precede far plane")
            }
            _ => Ok(()),
        }
    }
}

/// Camera rig shared by the scenes of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub views: usize,
    pub baseline: f64,
    pub verge_depth: f64,
    pub depth_range: (f64, f64),
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            focal: 160.0,
            views: 3,
            baseline: 200.0,
            verge_depth: 680.0,
            depth_range: (425.0, 933.8),
        }
    }
}

impl RigConfig {
    /// Alternating left/right, then up/down, at growing multiples of the baseline.
    pub fn source_offsets(&self) -> Vec<[f64; 3]> {
        (0..self.views.saturating_sub(1))
            .map(|i| {
                let ring = (i / 4 + 1) as f64 * self.baseline;
                match i % 4 {
                    0 => [-ring, 0.0, 0.0],
                    1 => [ring, 0.0, 0.0],
                    2 => [0.0, -ring, 0.0],
                    _ => [0.0, ring, 0.0],
                }
            })
            .collect()
    }
}

/// A rendered scene held in memory at full precision.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub spec: SceneSpec,
    pub images: Vec<GrayImage>,
    pub cameras: Vec<CameraParams>,
    /// Camera-frame depth per view; 0 where the ray hits nothing.
    pub depths: Vec<DepthMap>,
}

impl Scene {
    pub fn gt_depth(&self) -> &DepthMap {
        &self.depths[0]
    }

    pub fn gt_mask(&self) -> Mask {
        self.depths[0].map(|d| *d > 0.0)
    }

    pub fn depth_range(&self) -> (f64, f64) {
        self.spec.depth_range
    }

    /// Reference ground truth block-averaged to `1 / 2^level` resolution.
    pub fn gt_at_level(&self, level: usize) -> Result<(DepthMap, Mask)> {
        let mut d = self.gt_depth().clone();
        let mut m = self.gt_mask();
        for _ in 0..level {
            (d, m) = d.downsample_masked(&m)?;
        }
        Ok((d, m))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, i: i64, j: i64, k: i64) -> f64 {
    let mut h = splitmix(seed ^ octave.wrapping_mul(0xA24B_AED4_963E_E407));
    for v in [i, j, k] {
        h = splitmix(h ^ v as u64);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(seed: u64, octave: u64, p: Vector3<f64>) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let w = f.map(fade);
    let (i, j, k) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - w.x } else { w.x };
                let wy = if dy == 0 { 1.0 - w.y } else { w.y };
                let wz = if dz == 0 { 1.0 - w.z } else { w.z };
                acc += wx * wy * wz * lattice(seed, octave, i + dx, j + dy, k + dz);
            }
        }
    }
    acc
}

/// Surface albedo in `[0.02, 0.98]` at a world point.
pub fn albedo(seed: u64, p: &Vector3<f64>) -> f64 {
    let (mut sum, mut norm) = (0.0, 0.0);
    for (o, (cell, amp)) in OCTAVES.iter().enumerate() {
        sum += amp * value_noise(seed, o as u64, p / *cell);
        norm += amp;
    }
    (0.5 + 2.2 * (sum / norm - 0.5)).clamp(0.02, 0.98)
}

/// Smallest positive ray parameter hitting the geometry. With a direction of
/// unit camera-frame z, the parameter is the camera-frame depth.
pub fn intersect(geometry: &Geometry, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let plane = |n: Vector3<f64>, c: f64| {
        let den = n.dot(dir);
        if den.abs() < 1e-15 {
            return None;
        }
        let t = (c - n.dot(origin)) / den;
        (t > 0.0).then_some(t)
    };
    match *geometry {
        Geometry::FrontoParallel { depth } => plane(Vector3::z(), depth),
        Geometry::Slanted { normal, offset } => plane(Vector3::from(normal), offset),
        Geometry::Sphere {
            center,
            radius,
            backdrop,
        } => {
            let oc = origin - Vector3::from(center);
            let a = dir.dot(dir);
            let b = 2.0 * oc.dot(dir);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            let hit = if disc >= 0.0 {
                let s = disc.sqrt();
                [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)]
                    .into_iter()
                    .find(|t| *t > 0.0)
            } else {
                None
            };
            hit.or_else(|| backdrop.and_then(|z| plane(Vector3::z(), z)))
        }
        Geometry::TwoPlane { near, far, split_x } => plane(Vector3::z(), near)
            .filter(|t| origin.x + t * dir.x < split_x)
            .or_else(|| plane(Vector3::z(), far)),
    }
}

/// Renders one view: intensity and camera-frame depth (0 on misses).
pub fn render_view(spec: &SceneSpec, cam: &CameraParams) -> (GrayImage, DepthMap) {
    let (w, h) = (spec.width, spec.height);
    let origin = cam.center();
    let mut img = Grid::filled(w, h, 0.0);
    let mut depth = Grid::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let dir = cam.ray_direction(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
            if let Some(t) = intersect(&spec.geometry, &origin, &dir) {
                *img.get_mut(x, y) = albedo(spec.texture_seed, &(origin + t * dir));
                *depth.get_mut(x, y) = t;
            }
        }
    }
    (img, depth)
}

pub fn generate_scene(spec: &SceneSpec, name: impl Into<String>) -> Result<Scene> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    let (images, depths): (Vec<_>, Vec<_>) = cameras.iter().map(|c| render_view(spec, c)).unzip();
    let (lo, hi) = spec.depth_range;
    let hits: Vec<f64> = depths[0]
        .as_slice()
        .iter()
        .copied()
        .filter(|d| *d > 0.0)
        .collect();
    if hits.is_empty() {
        return Err(Error::DegenerateGeometry(
            "reference view sees no surface".into(),
        ));
    }
    if let Some(d) = hits.iter().find(|d| **d < lo || **d > hi) {
        return Err(Error::DegenerateGeometry(format!(
            "depth {d} outside [{lo}, {hi}]"
        )));
    }
    Ok(Scene {
        name: name.into(),
        spec: spec.clone(),
        images,
        cameras,
        depths,
    })
}

/// Random geometry of the given kind index (0..4) inside the rig's range.
fn random_geometry(kind: usize, rig: &RigConfig, rng: &mut ChaCha8Rng) -> Geometry {
    let (lo, hi) = rig.depth_range;
    let len = hi - lo;
    let at = |rng: &mut ChaCha8Rng, a: f64, b: f64| lo + len * rng.random_range(a..b);
    match kind {
        0 => Geometry::FrontoParallel {
            depth: at(rng, 0.15, 0.85),
        },
        1 => {
            let theta = rng.random_range(8.0f64..25.0).to_radians();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let n = [
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ];
            let d0 = at(rng, 0.35, 0.5);
            Geometry::Slanted {
                normal: n,
                offset: n[2] * d0,
            }
        }
        2 => {
            let radius = len * rng.random_range(0.2..0.3);
            let z = at(rng, 0.3, 0.5) + radius;
            Geometry::Sphere {
                center: [
                    rng.random_range(-0.1..0.1) * z,
                    rng.random_range(-0.08..0.08) * z,
                    z,
                ],
                radius,
                backdrop: Some(at(rng, 0.8, 0.95).max(z + radius * 0.5).min(hi - 1.0)),
            }
        }
        _ => {
            let near = at(rng, 0.1, 0.35);
            Geometry::TwoPlane {
                near,
                far: at(rng, 0.65, 0.9),
                split_x: near * rng.random_range(-0.15..0.15),
            }
        }
    }
}

/// Deterministic set of scenes cycling through the four geometry kinds.
/// Scene `i` depends only on `(seed, i)`.
pub fn generate_dataset(count: usize, seed: u64, rig: &RigConfig) -> Result<Vec<Scene>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(i as u64)));
            for _ in 0..64 {
                let geometry = random_geometry(i % 4, rig, &mut rng);
                let spec = SceneSpec::new(geometry, rng.random(), rig);
                match generate_scene(&spec, format!("scene_{i:04}")) {
                    Err(Error::DegenerateGeometry(_)) => continue,
                    other => return other,
                }
            }
            Err(Error::DegenerateGeometry(format!(
                "no valid geometry for scene {i}"
            )))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    seed: u64,
    spec: SceneSpec,
    views: Vec<ManifestView>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestView {
    image: PathBuf,
    camera: PathBuf,
    depth: PathBuf,
}

pub const MANIFEST: &str = "scene.json";

/// Writes `images/`, `cams/`, `depths/` and a JSON manifest into `dir`.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    for sub in ["images", "cams", "depths"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let (lo, hi) = scene.spec.depth_range;
    let mut views = Vec::new();
    for (i, ((img, cam), depth)) in scene
        .images
        .iter()
        .zip(&scene.cameras)
        .zip(&scene.depths)
        .enumerate()
    {
        let v = ManifestView {
            image: PathBuf::from(format!("images/{i:03}.ppm")),
            camera: PathBuf::from(format!("cams/{i:03}.txt")),
            depth: PathBuf::from(format!("depths/{i:03}.pfm")),
        };
        write_ppm(&dir.join(&v.image), img)?;
        write_camera(&dir.join(&v.camera), cam, lo, hi - lo)?;
        write_pfm(&dir.join(&v.depth), depth)?;
        views.push(v);
    }
    let manifest = Manifest {
        name: scene.name.clone(),
        seed: scene.spec.texture_seed,
        spec: scene.spec.clone(),
        views,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format("manifest", &path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a scene directory. Images come back quantized to 8 bits.
pub fn read_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", &path, e.to_string()))?;
    if manifest.views.len() < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: manifest.views.len(),
        });
    }
    let mut scene = Scene {
        name: manifest.name,
        spec: manifest.spec,
        images: Vec::new(),
        cameras: Vec::new(),
        depths: Vec::new(),
    };
    for v in &manifest.views {
        scene.images.push(read_pnm(&dir.join(&v.image))?);
        let cam = read_camera(&dir.join(&v.camera))?;
        scene.spec.depth_range = (cam.depth_min, cam.depth_min + cam.depth_len);
        scene.cameras.push(cam.camera);
        scene.depths.push(read_pfm(&dir.join(&v.depth))?);
    }
    Ok(scene)
}

/// Scene directories under `root` (those holding a manifest), sorted by name.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
