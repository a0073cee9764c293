//! Pinhole cameras and plane-sweep homographies.
//!
//! Extrinsics are world-to-camera: `x_cam = R * x_world + t`, so the camera
//! center is `C = -Rᵀ t`. Image coordinates are continuous with the center of
//! pixel `(col, row)` at `(col + 0.5, row + 0.5)`; scaling `K`'s first two rows
//! by `s` is then exact for `1/s` box-downsampled images.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;
const MIN_CAMERA_Z: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    axis: Vector3<f64>,
}

impl CameraParams {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let rtr = r.transpose() * r;
        if (rtr - Matrix3::identity()).amax() > ORTHO_TOL {
            return Err(Error::InvalidParameter(
                "rotation is not orthonormal".into(),
            ));
        }
        if (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidParameter(
                "rotation determinant is not +1".into(),
            ));
        }
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !upper || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 || k[(2, 2)] <= 0.0 {
            return Err(Error::InvalidParameter(
                "intrinsics must be upper-triangular with a positive diagonal".into(),
            ));
        }
        if !(k.iter().all(|v| v.is_finite()) && t.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidParameter(
                "non-finite camera parameter".into(),
            ));
        }
        // K is normalized so that K[2][2] = 1.
        let k = k / k[(2, 2)];
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("singular intrinsics".into()))?;
        let axis = r.transpose() * Vector3::z();
        Ok(Self {
            k,
            k_inv,
            r,
            t,
            axis: axis.normalize(),
        })
    }

    /// Camera at world position `center` with world-to-camera rotation `r`.
    pub fn from_center(k: Matrix3<f64>, r: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        let t = -(r * center);
        Self::new(k, r, t)
    }

    pub fn pinhole(f: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn intrinsics_inverse(&self) -> &Matrix3<f64> {
        &self.k_inv
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    /// Principal axis in world coordinates (third row of `R`).
    pub fn principal_axis(&self) -> &Vector3<f64> {
        &self.axis
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Same pose with the first two rows of `K` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut k = self.k;
        for c in 0..3 {
            k[(0, c)] *= factor;
            k[(1, c)] *= factor;
        }
        let k_inv = k.try_inverse().expect("scaled intrinsics stay invertible");
        Self {
            k,
            k_inv,
            r: self.r,
            t: self.t,
            axis: self.axis,
        }
    }

    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.r * point + self.t
    }

    /// World point seen at image position `pixel` with camera-frame depth `depth`.
    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let ray = self.k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        let cam = ray * (depth / ray.z);
        self.r.transpose() * (cam - self.t)
    }

    /// Unit-less viewing ray direction in world coordinates (camera-frame z = 1).
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let ray = self.k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        self.r.transpose() * (ray / ray.z)
    }
}

/// Projects a world point, returning the image position and camera-frame depth.
pub fn project(cam: &CameraParams, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    let pc = cam.to_camera(point);
    if pc.z <= MIN_CAMERA_Z {
        return Err(Error::BehindCamera { z: pc.z });
    }
    let h = cam.k * pc;
    Ok((Vector2::new(h.x / h.z, h.y / h.z), pc.z))
}

/// Projective map of reference-image positions to source-image positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography3x3(Matrix3<f64>);

impl Homography3x3 {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if s == 0.0 || !s.is_finite() {
            return Err(Error::DegenerateHomography);
        }
        Ok(Self(m / s))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Maps `(x, y)`; `None` when the point goes to infinity or behind.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w <= MIN_CAMERA_Z {
            return None;
        }
        Some((
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        ))
    }
}

/// Plane-induced homography for the fronto-parallel (w.r.t. `reference`)
/// plane at depth `d`:
///
/// `H(d) = K_s R_s (I - (τ_r - τ_s) n_rᵀ / d) R_rᵀ K_r⁻¹`
///
/// where `τ = Rᵀ t = -C` is the negated camera center in world coordinates.
/// For cameras without rotation `τ` coincides with `t`.
pub fn homography_first_stage(
    reference: &CameraParams,
    source: &CameraParams,
    d: f64,
) -> Result<Homography3x3> {
    if d <= 0.0 || !d.is_finite() {
        return Err(Error::NonPositiveDepth(d));
    }
    let tau_r = -reference.center();
    let tau_s = -source.center();
    let inner = Matrix3::identity() - (tau_r - tau_s) * reference.axis.transpose() / d;
    Homography3x3::new(source.k * source.r * inner * reference.r.transpose() * reference.k_inv)
}

/// Homography at `d_prev + delta`, the residual-depth form used by later stages.
pub fn homography_residual(
    reference: &CameraParams,
    source: &CameraParams,
    d_prev: f64,
    delta: f64,
) -> Result<Homography3x3> {
    let d = d_prev + delta;
    if d <= 0.0 || !d.is_finite() {
        return Err(Error::NonPositiveDepth(d));
    }
    homography_first_stage(reference, source, d)
}

/// Per-pixel, per-depth warp with the depth-independent part factored out:
/// `H(d) x ∝ A x + b / d`, the same map as [`homography_first_stage`].
#[derive(Debug, Clone, Copy)]
pub struct PlaneSweepWarp {
    a: Matrix3<f64>,
    b: Vector3<f64>,
}

impl PlaneSweepWarp {
    pub fn new(reference: &CameraParams, source: &CameraParams) -> Self {
        let rot = source.k * source.r;
        let a = rot * reference.r.transpose() * reference.k_inv;
        let b = rot * (reference.center() - source.center());
        Self { a, b }
    }

    #[inline]
    pub fn map(&self, x: f64, y: f64, depth: f64) -> Option<(f64, f64)> {
        let a = &self.a;
        let inv = 1.0 / depth;
        let w = a[(2, 0)] * x + a[(2, 1)] * y + a[(2, 2)] + self.b.z * inv;
        if w <= MIN_CAMERA_Z {
            return None;
        }
        let u = a[(0, 0)] * x + a[(0, 1)] * y + a[(0, 2)] + self.b.x * inv;
        let v = a[(1, 0)] * x + a[(1, 1)] * y + a[(1, 2)] + self.b.y * inv;
        Some((u / w, v / w))
    }
}

/// `count` evenly spaced depths spanning `[low, high]` inclusively; a single
/// plane sits at the midpoint.
pub fn sample_depth_planes(low: f64, high: f64, count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::ZeroCount);
    }
    if high < low || (high == low && count > 1) || !low.is_finite() || !high.is_finite() {
        return Err(Error::EmptyRange { low, high });
    }
    if count == 1 {
        return Ok(vec![0.5 * (low + high)]);
    }
    let step = (high - low) / (count - 1) as f64;
    let mut planes: Vec<f64> = (0..count).map(|j| low + step * j as f64).collect();
    planes[count - 1] = high;
    Ok(planes)
}

/// Rotation looking from `eye` toward `target` (camera y axis pointing to
/// world +y as much as possible).
pub fn look_at_rotation(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let z = target - eye;
    if z.norm() < 1e-12 {
        return Err(Error::InvalidParameter("look-at target equals eye".into()));
    }
    let z = z.normalize();
    let x = Vector3::y().cross(&z);
    if x.norm() < 1e-9 {
        return Err(Error::InvalidParameter(
            "look-at direction parallel to y".into(),
        ));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Ok(Matrix3::from_rows(&[
        x.transpose(),
        y.transpose(),
        z.transpose(),
    ]))
}
