//! Pinhole cameras, per-pixel cones, and Gaussian frustum samples along them.
//!
//! Each pixel ray is widened into a cone whose base radius grows linearly
//! with depth, and every depth interval on the cone is summarized by the
//! closed-form mean and diagonal covariance of the conical frustum it spans:
//!
//!   t_mu = (t0 + t1)/2,  t_d = (t1 - t0)/2,  denom = 3 t_mu^2 + t_d^2
//!   mu_t    = t_mu + 2 t_mu t_d^2 / denom
//!   var_t   = t_d^2/3 - 4 t_d^4 (12 t_mu^2 - t_d^2) / (15 denom^2)
//!   var_r   = r^2 (t_mu^2/4 + 5 t_d^2/12 - 4 t_d^4 / (15 denom))
//!   Sigma_k = var_t d_k^2 + var_r (1 - d_k^2)   (diagonal, world axes)

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolactError};
use crate::numcore::{Transform, Vec3};

/// Pinhole camera: focal length and principal point in pixels, plus the
/// world-to-camera rigid transform. Pixel (x, y) maps to the camera-frame
/// direction ((x - cx)/f, (y - cy)/f, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Transform,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(VolactError::Config(format!(
                "camera focal must be positive, got {}",
                self.focal
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(VolactError::Config("camera image size must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.world_to_camera.inverse().translation
    }

    /// Project a world point to continuous pixel coordinates; `None` when
    /// the point is at or behind the camera plane.
    pub fn project(&self, x: Vec3) -> Option<(f64, f64)> {
        let p = self.world_to_camera.apply(x);
        if p.0[2] <= 0.0 {
            return None;
        }
        Some((
            self.focal * p.0[0] / p.0[2] + self.cx,
            self.focal * p.0[1] / p.0[2] + self.cy,
        ))
    }

    /// A camera at `eye` looking at `target` with +y up in the image plane
    /// pointing along -`up` (image rows grow downward).
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let fwd = (target - eye).normalized();
        let right = fwd.cross(up).normalized();
        let down = fwd.cross(right);
        let rotation = crate::numcore::Mat3([right.0, down.0, fwd.0]);
        let translation = -(rotation * eye);
        Camera {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: Transform {
                rotation,
                translation,
            },
        }
    }
}

/// A pixel ray widened into a cone: its base radius at unit depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cone {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel_radius: f64,
}

/// A depth interval on a cone, summarized by a Gaussian in world space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSample {
    pub mu: Vec3,
    /// Per-axis variances (diagonal covariance).
    pub sigma_diag: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

/// Cone through the pixel-plane point `px` (continuous pixel coordinates;
/// pass x + 0.5, y + 0.5 for the center of integer pixel (x, y)).
/// The base radius is the pixel footprint 1/focal scaled by 2/sqrt(12),
/// the standard-deviation width of a unit box filter.
pub fn generate_cone(camera: &Camera, px: (f64, f64)) -> Cone {
    let dir_cam = Vec3::new(
        (px.0 - camera.cx) / camera.focal,
        (px.1 - camera.cy) / camera.focal,
        1.0,
    );
    let c2w = camera.world_to_camera.rotation.transpose();
    Cone {
        origin: camera.center(),
        direction: (c2w * dir_cam).normalized(),
        pixel_radius: (1.0 / camera.focal) * (2.0 / 12f64.sqrt()),
    }
}

/// Partition [near, far] into n contiguous intervals and summarize each by
/// its conical-frustum Gaussian. Stratification jitters only the interior
/// interval boundaries (endpoints stay fixed), so the intervals always tile
/// [near, far] exactly.
pub fn cast_cone_samples(
    cone: &Cone,
    near: f64,
    far: f64,
    n: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Vec<GaussianSample> {
    debug_assert!(near > 0.0 && near < far && n >= 1);
    let span = far - near;
    let mut bounds = Vec::with_capacity(n + 1);
    bounds.push(near);
    for i in 1..n {
        let u = if stratified { rng.gen::<f64>() } else { 0.5 };
        // (i - 0.5 + u)/n keeps boundaries strictly ordered for u in [0, 1).
        bounds.push(near + span * (i as f64 - 0.5 + u) / n as f64);
    }
    bounds.push(far);
    bounds
        .windows(2)
        .map(|w| frustum_gaussian(cone, w[0], w[1]))
        .collect()
}

fn frustum_gaussian(cone: &Cone, t0: f64, t1: f64) -> GaussianSample {
    let t_mu = 0.5 * (t0 + t1);
    let t_d = 0.5 * (t1 - t0);
    let t_mu2 = t_mu * t_mu;
    let t_d2 = t_d * t_d;
    let denom = 3.0 * t_mu2 + t_d2;
    let mu_t = t_mu + 2.0 * t_mu * t_d2 / denom;
    let var_t =
        (t_d2 / 3.0 - 4.0 * t_d2 * t_d2 * (12.0 * t_mu2 - t_d2) / (15.0 * denom * denom)).max(0.0);
    let r2 = cone.pixel_radius * cone.pixel_radius;
    let var_r = r2 * (t_mu2 / 4.0 + 5.0 * t_d2 / 12.0 - 4.0 * t_d2 * t_d2 / (15.0 * denom));
    let d = cone.direction;
    GaussianSample {
        mu: cone.origin + d * mu_t,
        sigma_diag: Vec3::new(
            var_t * d[0] * d[0] + var_r * (1.0 - d[0] * d[0]),
            var_t * d[1] * d[1] + var_r * (1.0 - d[1] * d[1]),
            var_t * d[2] * d[2] + var_r * (1.0 - d[2] * d[2]),
        ),
        t_near: t0,
        t_far: t1,
    }
}
