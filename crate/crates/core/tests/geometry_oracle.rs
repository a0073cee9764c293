use cascade_mvs::geometry::{
    homography_first_stage, homography_residual, project, CameraParams, PlaneSweepWarp,
};
use nalgebra::{Rotation3, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_camera(rng: &mut impl Rng, center: Vector3<f64>, max_angle: f64) -> CameraParams {
    let f = rng.random_range(80.0..600.0);
    let k = CameraParams::pinhole(
        f,
        rng.random_range(40.0..90.0),
        rng.random_range(30.0..70.0),
    );
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let r = Rotation3::new(axis.normalize() * rng.random_range(0.0..max_angle));
    CameraParams::from_center(k, *r.matrix(), center).unwrap()
}

/// A reference/source pair with the plane at depth `d` in front of both.
fn random_pair(rng: &mut impl Rng) -> (CameraParams, CameraParams, f64) {
    let c_ref = Vector3::new(
        rng.random_range(-50.0..50.0),
        rng.random_range(-50.0..50.0),
        rng.random_range(-50.0..50.0),
    );
    let reference = random_camera(rng, c_ref, 0.3);
    let baseline = Vector3::new(
        rng.random_range(-100.0..100.0),
        rng.random_range(-100.0..100.0),
        rng.random_range(-20.0..20.0),
    );
    let source = random_camera(rng, c_ref + baseline, 0.15);
    (reference, source, rng.random_range(300.0..1500.0))
}

/// Back-projects a reference pixel onto the plane and projects it into the source.
fn oracle(
    reference: &CameraParams,
    source: &CameraParams,
    px: Vector2<f64>,
    d: f64,
) -> Option<Vector2<f64>> {
    let x = reference.backproject(&px, d);
    project(source, &x).ok().map(|(p, _)| p)
}

#[test]
fn thousand_pairs_match_back_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 1000 {
        let (reference, source, d) = random_pair(&mut rng);
        let h = homography_first_stage(&reference, &source, d).unwrap();
        let warp = PlaneSweepWarp::new(&reference, &source);
        for _ in 0..4 {
            let px = Vector2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..96.0));
            let Some(expect) = oracle(&reference, &source, px, d) else {
                continue;
            };
            let (u, v) = h.apply(px.x, px.y).unwrap();
            worst = worst.max((Vector2::new(u, v) - expect).norm());
            let (wu, wv) = warp.map(px.x, px.y, d).unwrap();
            worst = worst.max((Vector2::new(wu, wv) - expect).norm());
        }
        checked += 1;
    }
    assert!(worst <= 1e-9, "worst reprojection difference {worst:e} px");
}

#[test]
fn identical_cameras_give_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = random_camera(&mut rng, Vector3::new(1.0, 2.0, 3.0), 0.5);
    let h = homography_first_stage(&cam, &cam, 700.0).unwrap();
    for (x, y) in [(0.5, 0.5), (64.0, 48.0), (127.5, 95.5)] {
        let (u, v) = h.apply(x, y).unwrap();
        assert!((u - x).abs() < 1e-10 && (v - y).abs() < 1e-10);
    }
}

#[test]
fn non_positive_depth_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (r, s, _) = random_pair(&mut rng);
    assert!(homography_first_stage(&r, &s, 0.0).is_err());
    assert!(homography_first_stage(&r, &s, -3.0).is_err());
    assert!(homography_residual(&r, &s, 10.0, -10.0).is_err());
}

proptest! {
    #[test]
    fn residual_form_composes_with_first_stage(seed in any::<u64>(), delta in -200.0f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, s, d) = random_pair(&mut rng);
        let a = homography_residual(&r, &s, d, delta).unwrap();
        let b = homography_first_stage(&r, &s, d + delta).unwrap();
        let scale = b.matrix().abs().max();
        prop_assert!((a.matrix() - b.matrix()).abs().max() <= 1e-12 * scale);
    }

    #[test]
    fn projection_inverts_back_projection(seed in any::<u64>(), x in 0.0f64..128.0, y in 0.0f64..96.0, d in 1.0f64..5000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = random_camera(&mut rng, Vector3::new(0.0, 0.0, 0.0), 1.0);
        let (p, depth) = project(&cam, &cam.backproject(&Vector2::new(x, y), d)).unwrap();
        prop_assert!((p - Vector2::new(x, y)).norm() < 1e-9);
        prop_assert!((depth - d).abs() <= 1e-12 * d);
    }
}
