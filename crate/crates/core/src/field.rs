//! Explicit voxel radiance fields.
//!
//! A field stores four pre-activated channels (density, R, G, B) on an
//! `N³` lattice covering the cube `[-1, 1]³`. Lattice vertices sit at voxel
//! centres, `x_i = -1 + (i + ½)·(2/N)`, and values are laid out as
//! `[channel, z, y, x]` with `x` fastest. Queries between vertices are
//! trilinear; queries inside the cube but beyond the outermost vertices
//! replicate the border value.

use raddiff_tensor::{softplus, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;

pub const CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    resolution: usize,
    values: Vec<f32>,
}

impl RadianceField {
    pub fn new(resolution: usize, values: Vec<f32>) -> Result<Self> {
        let expected = CHANNELS * resolution.pow(3);
        if resolution == 0 || values.len() != expected {
            return Err(Error::Dimension(format!(
                "field of resolution {resolution} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { resolution, values })
    }

    pub fn filled(resolution: usize, value: [f32; CHANNELS]) -> Self {
        let v = resolution.pow(3);
        let mut values = Vec::with_capacity(CHANNELS * v);
        for c in value {
            values.extend(std::iter::repeat(c).take(v));
        }
        Self { resolution, values }
    }

    pub fn zeros(resolution: usize) -> Self {
        Self::filled(resolution, [0.0; CHANNELS])
    }

    /// Rounds a `[4, N, N, N]` tensor to single precision.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [CHANNELS, a, b, c] if a == b && b == c => Ok(Self {
                resolution: a,
                values: t.data().iter().map(|&x| x as f32).collect(),
            }),
            _ => Err(Error::Dimension(format!(
                "expected a [4, N, N, N] tensor, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.resolution;
        Tensor::new(&[CHANNELS, n, n, n], self.values.iter().map(|&x| x as f64).collect())
            .expect("field shape invariant")
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn shape(&self) -> [usize; 4] {
        let n = self.resolution;
        [CHANNELS, n, n, n]
    }

    pub fn index(&self, channel: usize, z: usize, y: usize, x: usize) -> usize {
        let n = self.resolution;
        ((channel * n + z) * n + y) * n + x
    }

    pub fn get(&self, channel: usize, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(channel, z, y, x)]
    }

    pub fn set(&mut self, channel: usize, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(channel, z, y, x);
        self.values[i] = v;
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    pub fn vertex_position(&self, z: usize, y: usize, x: usize) -> Vec3 {
        let c = |i: usize| vertex_coord(self.resolution, i);
        [c(x), c(y), c(z)]
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Scene coordinate of lattice index `i` along one axis.
pub fn vertex_coord(resolution: usize, i: usize) -> f64 {
    -1.0 + (i as f64 + 0.5) * 2.0 / resolution as f64
}

pub fn in_domain(p: Vec3) -> bool {
    p.iter().all(|c| (-1.0..=1.0).contains(c))
}

/// The eight lattice vertices around a query point with their trilinear
/// weights. Indices are spatial offsets `(z·N + y)·N + x` within a channel.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

impl Corners {
    pub fn locate(resolution: usize, p: Vec3) -> Option<Self> {
        if !in_domain(p) {
            return None;
        }
        let n = resolution;
        let h = 2.0 / n as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = ((p[a] + 1.0) / h - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n.saturating_sub(2));
            base[a] = i0;
            frac[a] = if n == 1 { 0.0 } else { u - i0 as f64 };
        }
        let step = |a: usize, bit: usize| if bit == 1 && n > 1 { base[a] + 1 } else { base[a] };
        let mut index = [0usize; 8];
        let mut weight = [0.0f64; 8];
        for k in 0..8 {
            let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let (x, y, z) = (step(0, bx), step(1, by), step(2, bz));
            index[k] = (z * n + y) * n + x;
            let wx = if bx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if by == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if bz == 1 { frac[2] } else { 1.0 - frac[2] };
            weight[k] = wx * wy * wz;
        }
        Some(Self { index, weight })
    }

    /// Interpolates all channels of a `[4, N, N, N]` value buffer.
    pub fn gather(&self, values: &[f64], resolution: usize) -> [f64; CHANNELS] {
        let v = resolution.pow(3);
        let mut out = [0.0; CHANNELS];
        for (c, o) in out.iter_mut().enumerate() {
            let ch = &values[c * v..(c + 1) * v];
            *o = self.index.iter().zip(&self.weight).map(|(&i, &w)| w * ch[i]).sum();
        }
        out
    }

    /// Adds `grad[c]` distributed by the trilinear weights into `out`.
    pub fn scatter(&self, grad: [f64; CHANNELS], resolution: usize, out: &mut [f64]) {
        let v = resolution.pow(3);
        for (c, &g) in grad.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let ch = &mut out[c * v..(c + 1) * v];
            for (&i, &w) in self.index.iter().zip(&self.weight) {
                ch[i] += w * g;
            }
        }
    }
}

/// Pre-activated (density, R, G, B) at `p`, or `None` outside `[-1, 1]³`.
pub fn sample_field(f: &RadianceField, p: Vec3) -> Option<[f64; CHANNELS]> {
    let values: Vec<f64> = f.values.iter().map(|&x| x as f64).collect();
    sample_values(&values, f.resolution, p)
}

/// [`sample_field`] over a raw `[4, N, N, N]` buffer.
pub fn sample_values(values: &[f64], resolution: usize, p: Vec3) -> Option<[f64; CHANNELS]> {
    Corners::locate(resolution, p).map(|c| c.gather(values, resolution))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorMode {
    #[default]
    ClampedLinear,
}

/// Maps pre-activations to density `σ ≥ 0` and colour `ξ ∈ [0, 1]³`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivationConfig {
    /// Density per scene unit at large pre-activation slope.
    pub density_scale: f64,
    pub density_sharpness: f64,
    pub color_mode: ColorMode,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self {
            density_scale: 25.0,
            density_sharpness: 6.0,
            color_mode: ColorMode::ClampedLinear,
        }
    }
}

impl ActivationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.density_scale > 0.0 && self.density_sharpness > 0.0) {
            return Err(Error::Config(format!(
                "activation scale and sharpness must be positive, got {} and {}",
                self.density_scale, self.density_sharpness
            )));
        }
        Ok(())
    }

    /// `σ = scale · softplus(sharpness · pre)`.
    pub fn density(&self, pre: f64) -> f64 {
        self.density_scale * softplus(self.density_sharpness * pre)
    }

    pub fn density_grad(&self, pre: f64) -> f64 {
        self.density_scale * self.density_sharpness * raddiff_tensor::sigmoid(self.density_sharpness * pre)
    }

    /// `ξ = clamp((pre + 1) / 2, 0, 1)`.
    pub fn color(&self, pre: f64) -> f64 {
        ((pre + 1.0) * 0.5).clamp(0.0, 1.0)
    }

    /// Pass-through slope strictly inside (0, 1); zero on the clamp.
    pub fn color_grad(&self, pre: f64) -> f64 {
        let c = (pre + 1.0) * 0.5;
        if c > 0.0 && c < 1.0 {
            0.5
        } else {
            0.0
        }
    }

    /// Pre-density whose activated density equals `sigma`.
    pub fn inverse_density(&self, sigma: f64) -> f64 {
        let y = sigma / self.density_scale;
        // softplus⁻¹(y) = ln(eʸ − 1)
        (y.exp_m1()).ln() / self.density_sharpness
    }
}

/// Activated density and colour; `None` (outside the domain) is vacuum.
pub fn activate(pre: Option<[f64; CHANNELS]>, cfg: &ActivationConfig) -> (f64, [f64; 3]) {
    match pre {
        Some(p) => (cfg.density(p[0]), [cfg.color(p[1]), cfg.color(p[2]), cfg.color(p[3])]),
        None => (0.0, [0.0; 3]),
    }
}

/// Clamps every value to `[-1, 1]`.
pub fn clamp_field(f: &RadianceField) -> RadianceField {
    RadianceField {
        resolution: f.resolution,
        values: f.values.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> RadianceField {
        let len = CHANNELS * n.pow(3);
        RadianceField::new(n, (0..len).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn vertex_queries_are_exact() {
        let f = ramp(5);
        for (z, y, x) in [(0, 0, 0), (4, 4, 4), (2, 1, 3), (0, 4, 2)] {
            let got = sample_field(&f, f.vertex_position(z, y, x)).unwrap();
            for (c, &g) in got.iter().enumerate() {
                assert!((g - f.get(c, z, y, x) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_field_is_constant() {
        let f = RadianceField::filled(4, [0.3, -0.2, 0.9, -1.0]);
        for p in [[0.0, 0.0, 0.0], [-1.0, 0.99, 0.3], [0.77, -0.41, -1.0]] {
            let got = sample_field(&f, p).unwrap();
            for (g, e) in got.iter().zip([0.3, -0.2, 0.9, -1.0]) {
                assert!((g - e as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn edge_midpoint_is_average() {
        let f = ramp(4);
        let a = f.vertex_position(1, 2, 1);
        let b = f.vertex_position(1, 2, 2);
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
        let got = sample_field(&f, mid).unwrap();
        for (c, &g) in got.iter().enumerate() {
            let e = (f.get(c, 1, 2, 1) as f64 + f.get(c, 1, 2, 2) as f64) / 2.0;
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_is_vacuum() {
        let f = RadianceField::filled(3, [1.0; 4]);
        assert!(sample_field(&f, [1.01, 0.0, 0.0]).is_none());
        let (sigma, color) = activate(sample_field(&f, [0.0, -1.5, 0.0]), &ActivationConfig::default());
        assert_eq!(sigma, 0.0);
        assert_eq!(color, [0.0; 3]);
    }

    #[test]
    fn activation_examples() {
        let cfg = ActivationConfig::default();
        assert!((cfg.density(0.0) - 17.328_679_5).abs() < 1e-6);
        assert!((cfg.density(-1.0) - 0.061_892).abs() < 1e-5);
        let (_, c) = activate(Some([0.0, 1.0, -1.0, 0.0]), &cfg);
        assert_eq!(c, [1.0, 0.0, 0.5]);
        assert_eq!(cfg.color_grad(1.0), 0.0);
        assert_eq!(cfg.color_grad(0.2), 0.5);
        assert!((cfg.density(cfg.inverse_density(3.0)) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn clamp_examples() {
        let mut f = RadianceField::filled(2, [0.5, -0.5, 0.0, 1.0]);
        assert_eq!(clamp_field(&f), f);
        f.set(0, 0, 0, 0, 1.7);
        f.set(1, 1, 1, 1, -3.0);
        let c = clamp_field(&f);
        assert_eq!(c.get(0, 0, 0, 0), 1.0);
        assert_eq!(c.get(1, 1, 1, 1), -1.0);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(RadianceField::new(2, vec![0.0; 31]).is_err());
    }
}
