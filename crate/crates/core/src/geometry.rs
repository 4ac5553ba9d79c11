//! Cones, conical frustums and their Gaussian approximations.
//!
//! A pixel's viewing cone is sliced into conical frustums; each frustum is
//! summarized by the mean and variance of the uniform distribution over its
//! volume, first along the ray (`mu_t`, `sigma_t2`) and then perpendicular to
//! it (`sigma_r2`). The reparameterized moment formulas here stay finite for
//! extremely thin slices where the direct power-difference forms cancel
//! catastrophically; `frustum_moments_naive` keeps the direct forms around as
//! a cross-check.
//!
//! Conventions: ray directions are stored un-normalized and distances `t` are
//! in units of `|d|`; `pixel_radius` is the cone radius at unit distance
//! along `d`, so the world-space cone radius at parameter `t` is
//! `pixel_radius * t` regardless of `|d|`.

use crate::dataset::Camera;
use crate::vecmath::Vec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid t interval: t0={t0}, t1={t1} (need 0 <= t0 < t1)")]
    InvalidInterval { t0: f64, t1: f64 },
    #[error("invalid ray: |direction| and pixel_radius must be positive")]
    InvalidRay,
    #[error("invalid cylinder radius {0} (need > 0)")]
    InvalidRadius(f64),
    #[error("pixel ({row},{col}) outside image {width}x{height}")]
    PixelOutOfBounds { row: u32, col: u32, width: u32, height: u32 },
}

/// A pixel's cone axis. `direction` is deliberately not normalized; the
/// moment transforms divide by `|d|` where the math requires it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// Cone radius at unit distance along `direction`, world units.
    pub pixel_radius: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, pixel_radius: f64) -> Result<Self, GeometryError> {
        if !(direction.norm_squared() > 0.0) || !(pixel_radius > 0.0) {
            return Err(GeometryError::InvalidRay);
        }
        Ok(Ray { origin, direction, pixel_radius })
    }

    #[inline]
    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// The slice of a cone between `t0` and `t1` along its ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConicalFrustum {
    pub ray: Ray,
    pub t0: f64,
    pub t1: f64,
}

impl ConicalFrustum {
    pub fn new(ray: Ray, t0: f64, t1: f64) -> Result<Self, GeometryError> {
        if !(t0 >= 0.0 && t1 > t0) {
            return Err(GeometryError::InvalidInterval { t0, t1 });
        }
        Ok(ConicalFrustum { ray, t0, t1 })
    }
}

/// Axial/perpendicular moments of the uniform distribution over a frustum
/// (or cylinder) slice, in the ray's own parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrustumMoments {
    /// Mean distance along the ray, in units of `|d|`.
    pub mu_t: f64,
    /// Variance along the ray.
    pub sigma_t2: f64,
    /// Variance perpendicular to the ray. For `frustum_moments_stable` and
    /// `frustum_moments_naive` this is returned for a unit `pixel_radius`;
    /// scale by `pixel_radius^2` at the call site.
    pub sigma_r2: f64,
}

/// World-space Gaussian summary of a frustum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianRegion {
    pub mean: Vec3,
    /// Diagonal of the world-space covariance.
    pub cov_diag: Vec3,
    /// Full covariance, only materialized for the concatenated-PE variant.
    pub cov_full: Option<[[f64; 3]; 3]>,
}

impl GaussianRegion {
    /// Point region with zero extent (reduces IPE to plain PE).
    pub fn point(mean: Vec3) -> Self {
        GaussianRegion { mean, cov_diag: Vec3::ZERO, cov_full: None }
    }

    pub fn isotropic(mean: Vec3, var: f64) -> Self {
        GaussianRegion {
            mean,
            cov_diag: Vec3::new(var, var, var),
            cov_full: None,
        }
    }
}

/// Frustum membership test: the point must project into `(t0, t1)` along the
/// axis and lie within the cone's half-angle of the axis.
pub fn frustum_contains(f: &ConicalFrustum, x: Vec3) -> bool {
    let d = f.ray.direction;
    let rel = x - f.ray.origin;
    let dn2 = d.norm_squared();
    let axial = d.dot(rel) / dn2;
    if !(axial > f.t0 && axial < f.t1) {
        return false;
    }
    let cos_threshold = 1.0 / (1.0 + (f.ray.pixel_radius / dn2.sqrt()).powi(2)).sqrt();
    // NaN (x at the apex) compares false, which is the right answer.
    d.dot(rel) / (dn2.sqrt() * rel.norm()) > cos_threshold
}

/// Reparameterized frustum moments for a unit `pixel_radius`.
///
/// Written in terms of the midpoint `t_mu = (t0+t1)/2` and half-width
/// `t_delta = (t1-t0)/2` so that thin slices stay accurate: each moment is a
/// leading term plus a correction scaled by powers of `t_delta`.
pub fn frustum_moments_stable(t0: f64, t1: f64) -> Result<FrustumMoments, GeometryError> {
    if !(t0 >= 0.0 && t1 > t0) {
        return Err(GeometryError::InvalidInterval { t0, t1 });
    }
    let t_mu = 0.5 * (t0 + t1);
    let t_delta = 0.5 * (t1 - t0);
    let mu2 = t_mu * t_mu;
    let delta2 = t_delta * t_delta;
    let denom = 3.0 * mu2 + delta2;

    let mu_t = t_mu + 2.0 * t_mu * delta2 / denom;
    let sigma_t2 = delta2 / 3.0 - (4.0 * delta2 * delta2 * (12.0 * mu2 - delta2)) / (15.0 * denom * denom);
    let sigma_r2 = mu2 / 4.0 + 5.0 * delta2 / 12.0 - 4.0 * delta2 * delta2 / (15.0 * denom);

    Ok(FrustumMoments { mu_t, sigma_t2, sigma_r2 })
}

/// Direct power-difference frustum moments for a unit `pixel_radius`.
///
/// Loses precision when `t1 - t0` is small relative to the magnitudes of
/// `t0`, `t1`; kept only as an independent cross-check of the stable form.
pub fn frustum_moments_naive(t0: f64, t1: f64) -> Result<FrustumMoments, GeometryError> {
    if !(t0 >= 0.0 && t1 > t0) {
        return Err(GeometryError::InvalidInterval { t0, t1 });
    }
    let d3 = t1.powi(3) - t0.powi(3);
    let d4 = t1.powi(4) - t0.powi(4);
    let d5 = t1.powi(5) - t0.powi(5);
    let mu_t = 3.0 * d4 / (4.0 * d3);
    let e_t2 = 3.0 * d5 / (5.0 * d3);
    Ok(FrustumMoments {
        mu_t,
        sigma_t2: e_t2 - mu_t * mu_t,
        sigma_r2: 3.0 * d5 / (20.0 * d3),
    })
}

/// Moments of a uniform cylinder of the given radius around the ray segment
/// `[t0, t1]`: `t` is uniform on the interval and the cross-section is a
/// uniform disk, independent of `t`.
pub fn cylinder_moments(radius: f64, t0: f64, t1: f64) -> Result<FrustumMoments, GeometryError> {
    if !(radius > 0.0) {
        return Err(GeometryError::InvalidRadius(radius));
    }
    if !(t1 > t0) {
        return Err(GeometryError::InvalidInterval { t0, t1 });
    }
    let t_delta = 0.5 * (t1 - t0);
    Ok(FrustumMoments {
        mu_t: 0.5 * (t0 + t1),
        sigma_t2: t_delta * t_delta / 3.0,
        sigma_r2: radius * radius / 4.0,
    })
}

/// Lift moments into a world-space Gaussian along the given ray.
///
/// `cov_diag` is assembled directly from the axial/perpendicular variances;
/// the full 3x3 covariance is never materialized.
pub fn moments_to_gaussian(ray: &Ray, m: &FrustumMoments) -> GaussianRegion {
    let d = ray.direction;
    let dn2 = d.norm_squared();
    let dd = d.hadamard(d);
    let mean = ray.origin + d * m.mu_t;
    let cov_diag = Vec3::new(
        m.sigma_t2 * dd.x + m.sigma_r2 * (1.0 - dd.x / dn2),
        m.sigma_t2 * dd.y + m.sigma_r2 * (1.0 - dd.y / dn2),
        m.sigma_t2 * dd.z + m.sigma_r2 * (1.0 - dd.z / dn2),
    );
    GaussianRegion { mean, cov_diag, cov_full: None }
}

/// Gaussian approximation of a conical frustum in world coordinates.
pub fn frustum_to_gaussian(f: &ConicalFrustum) -> Result<GaussianRegion, GeometryError> {
    let mut m = frustum_moments_stable(f.t0, f.t1)?;
    m.sigma_r2 *= f.ray.pixel_radius * f.ray.pixel_radius;
    Ok(moments_to_gaussian(&f.ray, &m))
}

/// Same as [`frustum_to_gaussian`] but also materializes the full covariance
/// `sigma_t2 * d d^T + sigma_r2 * (I - d d^T / |d|^2)` for the
/// concatenated-PE encoding variant.
pub fn frustum_to_gaussian_full(f: &ConicalFrustum) -> Result<GaussianRegion, GeometryError> {
    let mut region = frustum_to_gaussian(f)?;
    let mut m = frustum_moments_stable(f.t0, f.t1)?;
    m.sigma_r2 *= f.ray.pixel_radius * f.ray.pixel_radius;
    let d = f.ray.direction;
    let dn2 = d.norm_squared();
    let da = d.to_array();
    let mut cov = [[0.0f64; 3]; 3];
    for (i, row) in cov.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            let outer = da[i] * da[j];
            let eye = if i == j { 1.0 } else { 0.0 };
            *c = m.sigma_t2 * outer + m.sigma_r2 * (eye - outer / dn2);
        }
    }
    region.cov_full = Some(cov);
    Ok(region)
}

/// World-space Gaussian for a cylinder slice along the ray (forward-facing
/// variant; the cross-section radius does not grow with distance).
pub fn cylinder_to_gaussian(ray: &Ray, radius: f64, t0: f64, t1: f64) -> Result<GaussianRegion, GeometryError> {
    let m = cylinder_moments(radius, t0, t1)?;
    Ok(moments_to_gaussian(ray, &m))
}

/// Ratio of cone radius to world pixel width; makes the cone's section on
/// the image plane match the variance of the pixel's square footprint.
pub const PIXEL_RADIUS_SCALE: f64 = 2.0 / 3.4641016151377544; // 2/sqrt(12)

/// Cone through an arbitrary point inside a pixel. `dx, dy` in [0,1] pick the
/// sub-pixel position ((0.5, 0.5) is the center); `radius_scale` shrinks the
/// footprint for jittered supersampling.
pub fn pixel_cone_at(
    camera: &Camera,
    row: u32,
    col: u32,
    dx: f64,
    dy: f64,
    radius_scale: f64,
) -> Result<Ray, GeometryError> {
    if row >= camera.height || col >= camera.width {
        return Err(GeometryError::PixelOutOfBounds {
            row,
            col,
            width: camera.width,
            height: camera.height,
        });
    }
    let f = camera.focal;
    // OpenGL-style camera space: x right, y up, looking down -z. Directions
    // keep z = -1 so the ray parameter t coincides with scene depth.
    let x = (col as f64 + dx - 0.5 * camera.width as f64) / f;
    let y = -(row as f64 + dy - 0.5 * camera.height as f64) / f;
    let dir_cam = Vec3::new(x, y, -1.0);
    let direction = camera.pose.transform_direction(dir_cam);
    // World pixel width at unit depth is 1/f.
    let pixel_radius = PIXEL_RADIUS_SCALE / f * radius_scale;
    Ray::new(camera.pose.translation, direction, pixel_radius)
}

/// Cone through the center of the given pixel, with the standard footprint.
pub fn pixel_cone(camera: &Camera, row: u32, col: u32) -> Result<Ray, GeometryError> {
    pixel_cone_at(camera, row, col, 0.5, 0.5, 1.0)
}
