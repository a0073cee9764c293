use std::io::Read;

use cascade_mvs::fusion::{
    fuse, fuse_reference, read_ply, write_ply, FusionParams, PlyFormat, Point, PointCloud,
};
use cascade_mvs::geometry::project;
use cascade_mvs::synth::{generate_scene, Geometry, RigConfig, SceneSpec};
use nalgebra::{Vector2, Vector3};

/// Minimal reader for the binary layout written by `write_ply`.
fn parse_binary_ply(bytes: &[u8]) -> Vec<([f32; 3], [u8; 3])> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .unwrap()
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).unwrap();
    assert!(header.starts_with("ply\nformat binary_little_endian 1.0\n"));
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .unwrap()
        .parse()
        .unwrap();
    let mut body = &bytes[end..];
    assert_eq!(body.len(), count * 15);
    let mut out = Vec::new();
    for _ in 0..count {
        let mut xyz = [0f32; 3];
        for c in &mut xyz {
            let mut b = [0u8; 4];
            body.read_exact(&mut b).unwrap();
            *c = f32::from_le_bytes(b);
        }
        let mut rgb = [0u8; 3];
        body.read_exact(&mut rgb).unwrap();
        out.push((xyz, rgb));
    }
    out
}

#[test]
fn single_point_binary_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.ply");
    let cloud = PointCloud {
        points: vec![Point {
            position: Vector3::new(1.5, -2.25, 700.125),
            color: [10, 200, 255],
        }],
    };
    write_ply(&cloud, &path, PlyFormat::BinaryLe).unwrap();
    let parsed = parse_binary_ply(&std::fs::read(&path).unwrap());
    assert_eq!(parsed, vec![([1.5f32, -2.25, 700.125], [10, 200, 255])]);
    assert_eq!(read_ply(&path).unwrap(), cloud);
}

#[test]
fn ascii_and_binary_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = PointCloud {
        points: (0..20)
            .map(|i| Point {
                position: Vector3::new(i as f64 * 0.5, -(i as f64), 400.0 + i as f64),
                color: [i as u8, 2 * i as u8, 3 * i as u8],
            })
            .collect(),
    };
    let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
    write_ply(&cloud, &a, PlyFormat::Ascii).unwrap();
    write_ply(&cloud, &b, PlyFormat::BinaryLe).unwrap();
    assert_eq!(read_ply(&a).unwrap(), read_ply(&b).unwrap());
}

#[test]
fn ground_truth_plane_fuses_onto_the_plane() {
    let normal = Vector3::new(0.15, -0.1, 1.0).normalize();
    let offset = 650.0;
    let spec = SceneSpec::new(
        Geometry::Slanted {
            normal: normal.into(),
            offset,
        },
        42,
        &RigConfig::default(),
    );
    let scene = generate_scene(&spec, "plane").unwrap();
    let params = FusionParams::default();
    let keyed = fuse_reference(&scene.depths, &scene.cameras, &scene.images, 0, &params).unwrap();

    let (w, h) = (spec.width, spec.height);
    let margin = 2.0;
    let interior: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let world = scene.cameras[0].backproject(&px, *scene.depths[0].get(x, y));
            scene.cameras[1..].iter().all(|c| {
                project(c, &world).is_ok_and(|(p, _)| {
                    p.x >= margin
                        && p.y >= margin
                        && p.x <= w as f64 - margin
                        && p.y <= h as f64 - margin
                })
            })
        })
        .collect();
    assert!(interior.len() > w * h / 2);
    let hit: std::collections::HashSet<(usize, usize)> = keyed.iter().map(|(px, _)| *px).collect();
    let covered = interior.iter().filter(|px| hit.contains(px)).count();
    assert!(
        covered as f64 >= 0.95 * interior.len() as f64,
        "{covered} of {}",
        interior.len()
    );

    let cloud = fuse(&scene.depths, &scene.cameras, &scene.images, &params).unwrap();
    let sq: f64 = cloud
        .points
        .iter()
        .map(|p| (normal.dot(&p.position) - offset).powi(2))
        .sum();
    let rms = (sq / cloud.len() as f64).sqrt();
    assert!(rms <= 1e-6, "rms plane distance {rms:e}");
}
