//! Spherical camera model.
//!
//! Cameras sit on a sphere around the origin and always look at it. A camera
//! location is `(theta, phi, radius)` with `theta` the polar angle from +z and
//! `phi` the azimuth in the xy-plane. The camera frame follows the x-right,
//! y-down, z-forward convention.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound of the sampled camera distance.
pub const RADIUS_MIN: f64 = 1.5;
/// Upper bound of the sampled camera distance.
pub const RADIUS_MAX: f64 = 2.2;
/// Horizontal field of view used for every rendered view (49.1 degrees).
pub const DEFAULT_FOV: f64 = 49.1 * PI / 180.0;

/// Camera location on the viewing sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPose {
    pub theta: f64,
    pub phi: f64,
    pub radius: f64,
}

impl SphericalPose {
    /// Validates `theta` and `radius` and wraps `phi` into `[0, 2π)`.
    pub fn new(theta: f64, phi: f64, radius: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::InvalidArgument(format!(
                "polar angle {theta} outside [0, π]"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "radius {radius} must be positive"
            )));
        }
        if !phi.is_finite() {
            return Err(Error::InvalidArgument(format!("azimuth {phi} not finite")));
        }
        Ok(Self {
            theta,
            phi: wrap_azimuth(phi),
            radius,
        })
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vector3::new(
            self.radius * st * cp,
            self.radius * st * sp,
            self.radius * ct,
        )
    }

    /// Applies a relative transform, clamping the polar angle to `[0, π]`.
    pub fn offset(&self, rel: &RelativePose) -> Result<Self> {
        Self::new(
            (self.theta + rel.d_theta).clamp(0.0, PI),
            self.phi + rel.d_phi,
            self.radius + rel.d_radius,
        )
    }
}

fn wrap_azimuth(phi: f64) -> f64 {
    let w = phi.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Wraps an angle difference into `(−π, π]`.
pub fn wrap_delta(d: f64) -> f64 {
    let w = d - 2.0 * PI * ((d - PI) / (2.0 * PI)).ceil();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Difference between two spherical camera locations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub d_theta: f64,
    pub d_phi: f64,
    pub d_radius: f64,
}

impl RelativePose {
    pub fn new(d_theta: f64, d_phi: f64, d_radius: f64) -> Self {
        Self {
            d_theta,
            d_phi: wrap_delta(d_phi),
            d_radius,
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

/// Viewpoint conditioning vector `[dθ, sin dφ, cos dφ, dr]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEncoding(pub [f64; 4]);

impl PoseEncoding {
    pub fn as_f32(&self) -> [f32; 4] {
        self.0.map(|v| v as f32)
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraExtrinsics {
    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Pinhole camera with square pixels and a centered principal point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeIntrinsics {
    pub width: usize,
    pub height: usize,
    pub horizontal_fov: f64,
}

impl PinholeIntrinsics {
    pub fn new(width: usize, height: usize, horizontal_fov: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {width}x{height} must be positive"
            )));
        }
        if !(horizontal_fov > 0.0 && horizontal_fov < PI) {
            return Err(Error::InvalidArgument(format!(
                "field of view {horizontal_fov} outside (0, π)"
            )));
        }
        Ok(Self {
            width,
            height,
            horizontal_fov,
        })
    }

    /// Square image with the default field of view.
    pub fn square(res: usize) -> Self {
        Self::new(res, res, DEFAULT_FOV).expect("positive resolution")
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.horizontal_fov / 2.0).tan()
    }
}

/// Builds the look-at extrinsics for a camera on the viewing sphere.
///
/// World +z is the up hint; at the poles, where it is parallel to the view
/// direction, +x is used instead.
pub fn spherical_to_extrinsics(pose: &SphericalPose) -> CameraExtrinsics {
    let center = pose.position();
    let forward = (-center).normalize();
    let mut up = Vector3::z();
    if forward.cross(&up).norm() < 1e-12 {
        up = Vector3::x();
    }
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    CameraExtrinsics {
        rotation,
        translation: -(rotation * center),
    }
}

/// Componentwise difference `to − from`, azimuth wrapped into `(−π, π]`.
pub fn relative_pose(from: &SphericalPose, to: &SphericalPose) -> RelativePose {
    RelativePose::new(
        to.theta - from.theta,
        to.phi - from.phi,
        to.radius - from.radius,
    )
}

pub fn encode_pose(rel: &RelativePose) -> PoseEncoding {
    let (s, c) = rel.d_phi.sin_cos();
    PoseEncoding([rel.d_theta, s, c, rel.d_radius])
}

/// World-space ray through image position `px + jitter`.
///
/// `jitter = (0.5, 0.5)` hits the pixel center; the principal point sits at
/// `(width / 2, height / 2)`.
pub fn ray_for_pixel(
    extr: &CameraExtrinsics,
    intr: &PinholeIntrinsics,
    px: (usize, usize),
    jitter: (f64, f64),
) -> (Vector3<f64>, Vector3<f64>) {
    let f = intr.focal();
    let x = px.0 as f64 + jitter.0 - intr.width as f64 / 2.0;
    let y = px.1 as f64 + jitter.1 - intr.height as f64 / 2.0;
    let dir_cam = Vector3::new(x / f, y / f, 1.0);
    let dir = (extr.rotation.transpose() * dir_cam).normalize();
    (extr.center(), dir)
}

/// Draws camera locations uniformly over the sphere with radius uniform in
/// `[RADIUS_MIN, RADIUS_MAX]`.
pub fn sample_training_cameras<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<SphericalPose> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let theta = (1.0 - 2.0 * u).clamp(-1.0, 1.0).acos();
            let phi = rng.random::<f64>() * 2.0 * PI;
            let radius = rng.random_range(RADIUS_MIN..=RADIUS_MAX);
            SphericalPose::new(theta, phi, radius).expect("sampled pose is valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equator_camera_on_x_axis() {
        let pose = SphericalPose::new(PI / 2.0, 0.0, 2.0).unwrap();
        let e = spherical_to_extrinsics(&pose);
        let c = e.center();
        assert!((c - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((e.forward() - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        // origin lies on the optical axis
        let o = e.world_to_camera(&Vector3::zeros());
        assert!(o.x.abs() < 1e-12 && o.y.abs() < 1e-12 && o.z > 0.0);
    }

    #[test]
    fn pole_uses_x_fallback() {
        let pose = SphericalPose::new(0.0, 1.234, 1.5).unwrap();
        let e = spherical_to_extrinsics(&pose);
        assert!((e.center() - Vector3::new(0.0, 0.0, 1.5)).norm() < 1e-12);
        let r = e.rotation;
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        // right = forward × x = (0,0,-1) × (1,0,0) = (0,-1,0)
        assert!((r.row(0).transpose() - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn position_matches_scalar_formulas() {
        let (t, p, r) = (1.0f64, 0.5f64, 1.8f64);
        let pose = SphericalPose::new(t, p, r).unwrap();
        let c = spherical_to_extrinsics(&pose).center();
        let expect = [r * t.sin() * p.cos(), r * t.sin() * p.sin(), r * t.cos()];
        for i in 0..3 {
            assert!((c[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_pose_examples() {
        let a = SphericalPose::new(1.0, 0.5, 1.8).unwrap();
        assert_eq!(relative_pose(&a, &a), RelativePose::new(0.0, 0.0, 0.0));
        let b = SphericalPose::new(1.3, 1.0, 2.0).unwrap();
        let rel = relative_pose(&a, &b);
        assert!((rel.d_theta - 0.3).abs() < 1e-12);
        assert!((rel.d_phi - 0.5).abs() < 1e-12);
        assert!((rel.d_radius - 0.2).abs() < 1e-12);

        let c = SphericalPose::new(1.0, 6.2, 1.8).unwrap();
        let d = SphericalPose::new(1.0, 0.1, 1.8).unwrap();
        let rel = relative_pose(&c, &d);
        let expect = 0.1 - 6.2 + 2.0 * PI;
        assert!((rel.d_phi - expect).abs() < 1e-12);
        assert!((rel.d_phi - 0.1832).abs() < 1e-4);
    }

    #[test]
    fn wrap_edges() {
        assert_eq!(wrap_delta(PI), PI);
        assert!((wrap_delta(-PI) - PI).abs() < 1e-15);
        assert!((wrap_delta(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_delta(-0.25) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn encode_examples() {
        assert_eq!(
            encode_pose(&RelativePose::identity()).0,
            [0.0, 0.0, 1.0, 0.0]
        );
        let e = encode_pose(&RelativePose::new(0.3, 0.5, 0.2)).0;
        assert!((e[1] - 0.47943).abs() < 1e-5);
        assert!((e[2] - 0.87758).abs() < 1e-5);
        let n = encode_pose(&RelativePose::new(0.3, -0.5, 0.2)).0;
        assert_eq!(n[0], e[0]);
        assert_eq!(n[1], -e[1]);
        assert_eq!(n[2], e[2]);
        assert_eq!(n[3], e[3]);
    }

    #[test]
    fn focal_length_64() {
        let intr = PinholeIntrinsics::square(64);
        let expect = 32.0 / (24.55f64.to_radians()).tan();
        assert!((intr.focal() - expect).abs() < 1e-9);
        assert!((intr.focal() - 70.07).abs() < 0.02);
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let pose = SphericalPose::new(1.1, 2.0, 1.9).unwrap();
        let e = spherical_to_extrinsics(&pose);
        let intr = PinholeIntrinsics::square(64);
        let (o, d) = ray_for_pixel(&e, &intr, (32, 32), (0.0, 0.0));
        assert!((o - pose.position()).norm() < 1e-12);
        assert!((d - e.forward()).norm() < 1e-12);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(SphericalPose::new(-0.1, 0.0, 1.0).is_err());
        assert!(SphericalPose::new(0.1, 0.0, 0.0).is_err());
        assert!(PinholeIntrinsics::new(0, 4, 0.5).is_err());
        assert!(PinholeIntrinsics::new(4, 4, PI).is_err());
    }

    #[test]
    fn sampled_cameras_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses = sample_training_cameras(&mut rng, 12);
        assert_eq!(poses.len(), 12);
        for p in &poses {
            assert!((RADIUS_MIN..=RADIUS_MAX).contains(&p.radius));
            assert!((0.0..=PI).contains(&p.theta));
            assert!((0.0..2.0 * PI).contains(&p.phi));
        }
    }

    #[test]
    fn sphere_uniform_cos_theta_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let poses = sample_training_cameras(&mut rng, 100_000);
        let mean: f64 = poses.iter().map(|p| p.theta.cos()).sum::<f64>() / poses.len() as f64;
        assert!(mean.abs() < 0.01, "mean cos theta {mean}");
        assert!(poses
            .iter()
            .all(|p| (RADIUS_MIN..=RADIUS_MAX).contains(&p.radius)));
    }
}
