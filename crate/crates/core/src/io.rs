//! On-disk formats: 8-bit PNM images, PFM depth maps, camera text files and
//! the little-endian float dumps used for feature maps and volumes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::CameraParams;
use crate::grid::Grid;

/// Grayscale image with intensities in `[0, 1]`.
pub type GrayImage = Grid<f64>;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits a binary netpbm-style header into `n` whitespace-separated tokens
/// (skipping `#` comments) and returns them with the payload offset.
fn header_tokens<'a>(
    bytes: &'a [u8],
    n: usize,
    path: &Path,
    kind: &'static str,
) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(kind, path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i])
            .map_err(|_| Error::format(kind, path, "non-ascii header"))?;
        tokens.push(tok);
    }
    // exactly one whitespace byte separates header and payload
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::format(kind, path, "missing header terminator"));
    }
    Ok((tokens, i + 1))
}

fn parse_num<T: std::str::FromStr>(tok: &str, path: &Path, kind: &'static str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::format(kind, path, format!("bad number '{tok}'")))
}

/// Reads an 8-bit binary PGM (P5) or PPM (P6); color is converted to luma.
pub fn read_pnm(path: &Path) -> Result<GrayImage> {
    let bytes = read_bytes(path)?;
    let (tok, off) = header_tokens(&bytes, 4, path, "PNM")?;
    let channels = match tok[0] {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::format(
                "PNM",
                path,
                format!("unsupported magic {other}"),
            ))
        }
    };
    let w: usize = parse_num(tok[1], path, "PNM")?;
    let h: usize = parse_num(tok[2], path, "PNM")?;
    let maxval: u32 = parse_num(tok[3], path, "PNM")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            "PNM",
            path,
            "only 8-bit images are supported",
        ));
    }
    let payload = &bytes[off..];
    if payload.len() < w * h * channels {
        return Err(Error::format("PNM", path, "truncated pixel data"));
    }
    let scale = 1.0 / maxval as f64;
    let data = (0..w * h)
        .map(|i| {
            if channels == 1 {
                payload[i] as f64 * scale
            } else {
                let p = &payload[3 * i..3 * i + 3];
                (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) * scale
            }
        })
        .collect();
    Grid::from_vec(w, h, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.as_slice().iter().map(|&v| quantize(v)));
    write_bytes(path, &out)
}

/// Writes a gray image as PPM with equal channels.
pub fn write_ppm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for &v in img.as_slice() {
        let q = quantize(v);
        out.extend([q, q, q]);
    }
    write_bytes(path, &out)
}

/// Single-channel little-endian PFM: "Pf", scale -1.0, bottom-up rows.
pub fn write_pfm(path: &Path, map: &Grid<f64>) -> Result<()> {
    let (w, h) = (map.width(), map.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend((*map.get(x, y) as f32).to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_pfm(path: &Path) -> Result<Grid<f64>> {
    let bytes = read_bytes(path)?;
    let (tok, off) = header_tokens(&bytes, 4, path, "PFM")?;
    if tok[0] != "Pf" {
        return Err(Error::format(
            "PFM",
            path,
            "only single-channel 'Pf' is supported",
        ));
    }
    let w: usize = parse_num(tok[1], path, "PFM")?;
    let h: usize = parse_num(tok[2], path, "PFM")?;
    let scale: f64 = parse_num(tok[3], path, "PFM")?;
    if scale == 0.0 {
        return Err(Error::format("PFM", path, "zero scale"));
    }
    let little = scale < 0.0;
    let payload = &bytes[off..];
    if payload.len() < 4 * w * h {
        return Err(Error::format("PFM", path, "truncated data"));
    }
    let mut grid = Grid::filled(w, h, 0.0);
    for (i, chunk) in payload[..4 * w * h].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (x, row) = (i % w, i / w);
        *grid.get_mut(x, h - 1 - row) = v as f64;
    }
    Ok(grid)
}

/// Camera file: "extrinsic", 4x4 world-to-camera matrix, "intrinsic", 3x3 K,
/// then "depth_min depth_range_length".
pub fn write_camera(path: &Path, cam: &CameraParams, depth_min: f64, depth_len: f64) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let r = cam.rotation();
    let t = cam.translation();
    let k = cam.intrinsics();
    let mut text = String::from("extrinsic\n");
    for i in 0..3 {
        text += &format!(
            "{:e} {:e} {:e} {:e}\n",
            r[(i, 0)],
            r[(i, 1)],
            r[(i, 2)],
            t[i]
        );
    }
    text += "0 0 0 1\nintrinsic\n";
    for i in 0..3 {
        text += &format!("{:e} {:e} {:e}\n", k[(i, 0)], k[(i, 1)], k[(i, 2)]);
    }
    text += &format!("{depth_min:e} {depth_len:e}\n");
    w.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct CameraFile {
    pub camera: CameraParams,
    pub depth_min: f64,
    pub depth_len: f64,
}

pub fn read_camera(path: &Path) -> Result<CameraFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut expect = |label: &str| -> Result<()> {
        match lines.next() {
            Some(l) if l == label => Ok(()),
            _ => Err(Error::format("camera", path, format!("expected '{label}'"))),
        }
    };
    expect("extrinsic")?;
    let nums =
        |lines: &mut dyn Iterator<Item = &str>, rows: usize, cols: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::format("camera", path, "truncated matrix"))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| parse_num(t, path, "camera"))
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(Error::format(
                        "camera",
                        path,
                        format!("expected {cols} values per row"),
                    ));
                }
                out.extend(vals);
            }
            Ok(out)
        };
    let ext = nums(&mut lines, 4, 4)?;
    match lines.next() {
        Some("intrinsic") => {}
        _ => return Err(Error::format("camera", path, "expected 'intrinsic'")),
    }
    let k = nums(&mut lines, 3, 3)?;
    let range = nums(&mut lines, 1, 2)?;
    let r = Matrix3::new(
        ext[0], ext[1], ext[2], ext[4], ext[5], ext[6], ext[8], ext[9], ext[10],
    );
    let t = Vector3::new(ext[3], ext[7], ext[11]);
    let k = Matrix3::from_row_slice(&k);
    Ok(CameraFile {
        camera: CameraParams::new(k, r, t)?,
        depth_min: range[0],
        depth_len: range[1],
    })
}

/// 16-byte header (4-byte magic, three u32 dims) followed by f32 LE values.
pub fn write_float_dump(path: &Path, magic: &[u8; 4], dims: [u32; 3], data: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(magic);
    for d in dims {
        out.extend(d.to_le_bytes());
    }
    for &v in data {
        out.extend((v as f32).to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_float_dump(path: &Path, magic: &[u8; 4]) -> Result<([u32; 3], Vec<f32>)> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(Error::format("dump", path, "bad magic"));
    }
    let dim = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let dims = [dim(4), dim(8), dim(12)];
    let n = dims.iter().map(|&d| d as usize).product::<usize>();
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format("dump", path, "size does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}
