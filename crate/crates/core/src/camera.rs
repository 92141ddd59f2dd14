//! Pinhole cameras, pixel rays and the spiral capture trajectory.
//!
//! Camera frame: `+x` right, `+y` down, `+z` forward. The rotation matrix
//! is camera-to-world, so its columns are the camera axes in world space.
//! World `+z` is up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::{self, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    position: Vec3,
    rotation: [[f64; 3]; 3],
    focal: f64,
    width: usize,
    height: usize,
    principal: [f64; 2],
}

fn check_rotation(r: &[[f64; 3]; 3], tol: f64) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let e = if i == j { 1.0 } else { 0.0 };
            if (d - e).abs() > tol {
                return Err(Error::NotOrthonormal(format!("column dot product ({i},{j}) = {d}")));
            }
        }
    }
    let cols = |j: usize| [r[0][j], r[1][j], r[2][j]];
    let det = vec3::dot(cols(0), vec3::cross(cols(1), cols(2)));
    if (det - 1.0).abs() > tol {
        return Err(Error::NotOrthonormal(format!("determinant {det}")));
    }
    Ok(())
}

impl Camera {
    /// Principal point defaults to the image centre.
    pub fn new(position: Vec3, rotation: [[f64; 3]; 3], focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::with_tolerance(position, rotation, focal, width, height, 1e-6)
    }

    pub(crate) fn with_tolerance(
        position: Vec3,
        rotation: [[f64; 3]; 3],
        focal: f64,
        width: usize,
        height: usize,
        tol: f64,
    ) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::Config(format!("focal length must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("image size {width}x{height} is empty")));
        }
        check_rotation(&rotation, tol)?;
        Ok(Self {
            position,
            rotation,
            focal,
            width,
            height,
            principal: [width as f64 / 2.0, height as f64 / 2.0],
        })
    }

    /// A camera at `position` facing `target` with world `+z` as up.
    pub fn look_at(position: Vec3, target: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = vec3::normalize(vec3::sub(target, position));
        let mut up = [0.0, 0.0, 1.0];
        if vec3::norm(vec3::cross(forward, up)) < 1e-9 {
            up = [0.0, 1.0, 0.0];
        }
        let right = vec3::normalize(vec3::cross(forward, up));
        let down = vec3::cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::new(position, rotation, focal, width, height)
    }

    pub fn with_principal(mut self, principal: [f64; 2]) -> Self {
        self.principal = principal;
        self
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn principal(&self) -> [f64; 2] {
        self.principal
    }

    pub fn forward(&self) -> Vec3 {
        [self.rotation[0][2], self.rotation[1][2], self.rotation[2][2]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous image coordinates of a world point, or `None` behind the
    /// camera. Pixel `(u, v)` covers `[u, u+1) × [v, v+1)`.
    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        let d = vec3::sub(p, self.position);
        let r = &self.rotation;
        let c: Vec3 = [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ];
        (c[2] > 1e-12).then(|| {
            [
                self.principal[0] + self.focal * c[0] / c[2],
                self.principal[1] + self.focal * c[1] / c[2],
            ]
        })
    }

    fn direction_through(&self, u: f64, v: f64) -> Vec3 {
        let c = [
            (u - self.principal[0]) / self.focal,
            (v - self.principal[1]) / self.focal,
            1.0,
        ];
        let r = &self.rotation;
        vec3::normalize([
            r[0][0] * c[0] + r[0][1] * c[1] + r[0][2] * c[2],
            r[1][0] * c[0] + r[1][1] * c[1] + r[1][2] * c[2],
            r[2][0] * c[0] + r[2][1] * c[1] + r[2][2] * c[2],
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    /// False when the ray never enters `[-1, 1]³` ahead of its origin.
    pub hit: bool,
}

impl Ray {
    /// Builds a ray and intersects it with the domain cube; `direction` is
    /// normalized here.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        let direction = vec3::normalize(direction);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if direction[a].abs() < 1e-15 {
                if origin[a] < -1.0 || origin[a] > 1.0 {
                    t0 = f64::INFINITY;
                    t1 = f64::NEG_INFINITY;
                }
                continue;
            }
            let inv = 1.0 / direction[a];
            let (mut ta, mut tb) = ((-1.0 - origin[a]) * inv, (1.0 - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        let t_near = t0.max(0.0);
        let hit = t1 >= t_near && t1 > 0.0;
        Self {
            origin,
            direction,
            t_near: if hit { t_near } else { 0.0 },
            t_far: if hit { t1 } else { 0.0 },
            hit,
        }
    }

    pub fn at(&self, s: f64) -> Vec3 {
        vec3::add(self.origin, vec3::scale(self.direction, s))
    }

    pub fn length(&self) -> f64 {
        self.t_far - self.t_near
    }
}

/// Rays through the centres of the given `(u, v)` pixels.
pub fn pixel_rays(cam: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= cam.width || v >= cam.height {
                return Err(Error::Dimension(format!(
                    "pixel ({u}, {v}) outside {}x{} image",
                    cam.width, cam.height
                )));
            }
            Ok(Ray::new(
                cam.position,
                cam.direction_through(u as f64 + 0.5, v as f64 + 0.5),
            ))
        })
        .collect()
}

/// All pixels in row-major order.
pub fn all_pixels(width: usize, height: usize) -> Vec<(usize, usize)> {
    (0..height).flat_map(|v| (0..width).map(move |u| (u, v))).collect()
}

/// Focal length at which the central cross-section of the domain cube spans
/// about 80% of the image from distance 2.5.
pub fn default_focal(width: usize) -> f64 {
    width as f64
}

/// Archimedean spiral on a sphere around the origin: pitch sweeps linearly
/// while azimuth winds uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpiralSpec {
    pub n_views: usize,
    pub radius: f64,
    pub pitch_lo_deg: f64,
    pub pitch_hi_deg: f64,
    pub turns: f64,
    /// Azimuth of the first camera in degrees.
    pub azimuth_offset_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Defaults to [`default_focal`].
    pub focal: Option<f64>,
}

impl Default for SpiralSpec {
    fn default() -> Self {
        Self {
            n_views: 200,
            radius: 2.5,
            pitch_lo_deg: -20.0,
            pitch_hi_deg: 60.0,
            turns: 5.0,
            azimuth_offset_deg: 0.0,
            width: 128,
            height: 128,
            focal: None,
        }
    }
}

pub fn spiral_trajectory(spec: &SpiralSpec) -> Result<Vec<Camera>> {
    if spec.n_views == 0 {
        return Err(Error::Config("spiral needs at least one view".into()));
    }
    if !(spec.radius > 0.0) {
        return Err(Error::Config(format!(
            "spiral radius must be positive, got {}",
            spec.radius
        )));
    }
    let focal = spec.focal.unwrap_or_else(|| default_focal(spec.width));
    let last = (spec.n_views - 1).max(1) as f64;
    (0..spec.n_views)
        .map(|i| {
            let s = i as f64 / last;
            let pitch = (spec.pitch_lo_deg + (spec.pitch_hi_deg - spec.pitch_lo_deg) * s).to_radians();
            let azimuth = spec.azimuth_offset_deg.to_radians() + std::f64::consts::TAU * spec.turns * s;
            let pos = [
                spec.radius * pitch.cos() * azimuth.cos(),
                spec.radius * pitch.cos() * azimuth.sin(),
                spec.radius * pitch.sin(),
            ];
            Camera::look_at(pos, [0.0; 3], focal, spec.width, spec.height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centre_pixel_ray_on_axis() {
        let cam = Camera::look_at([0.0, 0.0, 2.5], [0.0; 3], 33.0, 33, 33).unwrap();
        let r = pixel_rays(&cam, &[(16, 16)]).unwrap()[0];
        assert!(vec3::norm(vec3::sub(r.direction, [0.0, 0.0, -1.0])) < 1e-12);
        assert!((r.t_near - 1.5).abs() < 1e-12);
        assert!((r.t_far - 3.5).abs() < 1e-12);
        assert!(r.hit);
    }

    #[test]
    fn ray_pointing_away_misses() {
        let r = Ray::new([0.0, 0.0, 2.5], [0.0, 0.0, 1.0]);
        assert!(!r.hit);
        let r = Ray::new([0.0, 3.0, 2.5], [0.0, 0.0, -1.0]);
        assert!(!r.hit);
    }

    #[test]
    fn ray_from_inside_starts_at_zero() {
        let r = Ray::new([0.2, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert!(r.hit);
        assert_eq!(r.t_near, 0.0);
        assert!((r.t_far - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_intrinsics_and_rotation() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new([0.0; 3], id, 0.0, 4, 4).is_err());
        let flip = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            Camera::new([0.0; 3], flip, 1.0, 4, 4),
            Err(Error::NotOrthonormal(_))
        ));
    }

    #[test]
    fn pixel_out_of_range() {
        let cam = Camera::look_at([0.0, 0.0, 2.5], [0.0; 3], 8.0, 8, 8).unwrap();
        assert!(pixel_rays(&cam, &[(8, 0)]).is_err());
    }

    #[test]
    fn spiral_defaults() {
        let cams = spiral_trajectory(&SpiralSpec::default()).unwrap();
        assert_eq!(cams.len(), 200);
        for c in &cams {
            assert!((vec3::norm(c.position()) - 2.5).abs() < 1e-12);
            let to_origin = vec3::normalize(vec3::scale(c.position(), -1.0));
            assert!((vec3::dot(c.forward(), to_origin) - 1.0).abs() < 1e-12);
        }
        let pitch = |c: &Camera| (c.position()[2] / 2.5).asin().to_degrees();
        assert!((pitch(&cams[0]) + 20.0).abs() < 1e-9);
        assert!((pitch(&cams[199]) - 60.0).abs() < 1e-9);
    }

    #[test]
    fn single_view_spiral() {
        let spec = SpiralSpec {
            n_views: 1,
            ..Default::default()
        };
        let cams = spiral_trajectory(&spec).unwrap();
        assert_eq!(cams.len(), 1);
        assert!((cams[0].position()[2] - 2.5 * (-20f64).to_radians().sin()).abs() < 1e-12);
    }
}
