//! Multi-view consistency fusion of per-view depth maps into a point cloud,
//! and PLY output.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_volume::bilinear_taps;
use crate::error::{Error, Result};
use crate::geometry::{project, CameraParams};
use crate::grid::DepthMap;
use crate::io::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
}

/// World-space points. Coordinates are kept in double precision in memory;
/// PLY files store them as 32-bit floats.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    pub reproj_tol_px: f64,
    pub rel_depth_tol: f64,
    /// Number of other views that must agree with a reference pixel.
    pub min_consistent_views: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            reproj_tol_px: 0.75,
            rel_depth_tol: 0.01,
            min_consistent_views: 2,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.reproj_tol_px > 0.0) || !(self.rel_depth_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "fusion tolerances must be positive (got {} px, {})",
                self.reproj_tol_px, self.rel_depth_tol
            )));
        }
        Ok(())
    }
}

fn usable(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Depth at a continuous image position, interpolated in inverse depth so
/// that planes are reproduced exactly.
fn sample_depth(map: &DepthMap, u: f64, v: f64) -> Option<f64> {
    let taps = bilinear_taps(u, v, map.width(), map.height())?;
    let mut inv = 0.0;
    for (i, w) in taps {
        if w == 0.0 {
            continue;
        }
        let d = map.as_slice()[i];
        if !usable(d) {
            return None;
        }
        inv += w / d;
    }
    (inv > 0.0).then(|| 1.0 / inv)
}

/// Back-projection of view `j`'s depth at the projection of `x`, if the
/// round trip lands within tolerance.
fn consistent_point(
    x: &Vector3<f64>,
    pixel: &Vector2<f64>,
    ref_cam: &CameraParams,
    cam: &CameraParams,
    depth: &DepthMap,
    params: &FusionParams,
) -> Option<Vector3<f64>> {
    let (p, d_proj) = project(cam, x).ok()?;
    let d = sample_depth(depth, p.x, p.y)?;
    if (d - d_proj).abs() / d_proj >= params.rel_depth_tol {
        return None;
    }
    let back = cam.backproject(&p, d);
    let (q, _) = project(ref_cam, &back).ok()?;
    ((q - pixel).norm() < params.reproj_tol_px).then_some(back)
}

fn gray_to_rgb(v: f64) -> [u8; 3] {
    let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [q, q, q]
}

fn check_inputs(
    depths: &[DepthMap],
    cams: &[CameraParams],
    images: &[GrayImage],
    params: &FusionParams,
) -> Result<()> {
    params.validate()?;
    if depths.len() < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: depths.len(),
        });
    }
    if cams.len() != depths.len() || images.len() != depths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} depth maps, {} cameras, {} images",
            depths.len(),
            cams.len(),
            images.len()
        )));
    }
    for (d, img) in depths.iter().zip(images) {
        if !d.same_shape(img) {
            return Err(Error::ShapeMismatch(
                "depth map and image sizes differ".into(),
            ));
        }
    }
    Ok(())
}

fn fuse_view(
    depths: &[DepthMap],
    cams: &[CameraParams],
    images: &[GrayImage],
    r: usize,
    params: &FusionParams,
) -> Vec<((usize, usize), Point)> {
    let depth = &depths[r];
    let mut out = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = *depth.get(x, y);
            if !usable(d) {
                continue;
            }
            let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let world = cams[r].backproject(&pixel, d);
            let mut sum = world;
            let mut agree = 0;
            for j in (0..depths.len()).filter(|&j| j != r) {
                if let Some(p) =
                    consistent_point(&world, &pixel, &cams[r], &cams[j], &depths[j], params)
                {
                    sum += p;
                    agree += 1;
                }
            }
            if agree >= params.min_consistent_views {
                let point = Point {
                    position: sum / (agree + 1) as f64,
                    color: gray_to_rgb(*images[r].get(x, y)),
                };
                out.push(((x, y), point));
            }
        }
    }
    out
}

/// Points produced with view `reference` as the reference, keyed by the
/// reference pixel they came from, in row-major order.
pub fn fuse_reference(
    depths: &[DepthMap],
    cams: &[CameraParams],
    images: &[GrayImage],
    reference: usize,
    params: &FusionParams,
) -> Result<Vec<((usize, usize), Point)>> {
    check_inputs(depths, cams, images, params)?;
    if reference >= depths.len() {
        return Err(Error::InvalidParameter(format!(
            "reference view {reference} of {}",
            depths.len()
        )));
    }
    Ok(fuse_view(depths, cams, images, reference, params))
}

/// Fuses every view in turn as the reference. Points are ordered by view
/// index, then row-major pixel order.
pub fn fuse(
    depths: &[DepthMap],
    cams: &[CameraParams],
    images: &[GrayImage],
    params: &FusionParams,
) -> Result<PointCloud> {
    check_inputs(depths, cams, images, params)?;
    let per_view: Vec<Vec<((usize, usize), Point)>> = (0..depths.len())
        .into_par_iter()
        .map(|r| fuse_view(depths, cams, images, r, params))
        .collect();
    Ok(PointCloud {
        points: per_view.into_iter().flatten().map(|(_, p)| p).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    BinaryLe,
}

impl std::str::FromStr for PlyFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascii" => Ok(PlyFormat::Ascii),
            "binary_le" | "binary" => Ok(PlyFormat::BinaryLe),
            other => Err(Error::InvalidParameter(format!(
                "unknown PLY format {other:?}"
            ))),
        }
    }
}

fn ply_header(format: PlyFormat, count: usize) -> String {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLe => "binary_little_endian",
    };
    format!(
        "ply\nformat {fmt} 1.0\nelement vertex {count}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    )
}

pub fn write_ply(pc: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    let mut out = ply_header(format, pc.len()).into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut body = String::new();
            for p in &pc.points {
                let [x, y, z] = [
                    p.position.x as f32,
                    p.position.y as f32,
                    p.position.z as f32,
                ];
                let [r, g, b] = p.color;
                let _ = writeln!(body, "{x} {y} {z} {r} {g} {b}");
            }
            out.extend(body.into_bytes());
        }
        PlyFormat::BinaryLe => {
            out.reserve(pc.len() * 15);
            for p in &pc.points {
                for c in [p.position.x, p.position.y, p.position.z] {
                    out.extend((c as f32).to_le_bytes());
                }
                out.extend(p.color);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the vertex layout written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |m: &str| Error::format("PLY", path, m);
    let mut line = String::new();
    let mut format = None;
    let mut count = None;
    let mut props = Vec::new();
    loop {
        line.clear();
        if reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path, e))?
            == 0
        {
            return Err(bad("missing end_header"));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] => {}
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", ..] => return Err(bad("unsupported format")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?)
            }
            ["element", ..] => return Err(bad("unsupported element")),
            ["property", ty, name] => props.push(format!("{ty} {name}")),
            ["end_header"] => break,
            _ => return Err(bad("unexpected header line")),
        }
    }
    let expected = [
        "float x",
        "float y",
        "float z",
        "uchar red",
        "uchar green",
        "uchar blue",
    ];
    if props != expected {
        return Err(bad("unsupported vertex properties"));
    }
    let (format, count) = (
        format.ok_or_else(|| bad("missing format"))?,
        count.ok_or_else(|| bad("missing vertex count"))?,
    );
    let mut points = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            for _ in 0..count {
                line.clear();
                reader
                    .read_line(&mut line)
                    .map_err(|e| Error::io(path, e))?;
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 6 {
                    return Err(bad("short vertex line"));
                }
                let c = |i: usize| {
                    f[i].parse::<f32>()
                        .map(f64::from)
                        .map_err(|_| bad("bad coordinate"))
                };
                let u = |i: usize| f[i].parse::<u8>().map_err(|_| bad("bad color"));
                points.push(Point {
                    position: Vector3::new(c(0)?, c(1)?, c(2)?),
                    color: [u(3)?, u(4)?, u(5)?],
                });
            }
        }
        PlyFormat::BinaryLe => {
            let mut rec = [0u8; 15];
            for _ in 0..count {
                reader
                    .read_exact(&mut rec)
                    .map_err(|_| bad("truncated vertex data"))?;
                let c = |i: usize| {
                    f64::from(f32::from_le_bytes(
                        rec[4 * i..4 * i + 4].try_into().expect("4 bytes"),
                    ))
                };
                points.push(Point {
                    position: Vector3::new(c(0), c(1), c(2)),
                    color: [rec[12], rec[13], rec[14]],
                });
            }
        }
    }
    Ok(PointCloud { points })
}
