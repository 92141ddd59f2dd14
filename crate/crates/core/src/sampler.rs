//! Reverse-diffusion samplers: unconditional generation, masked completion
//! and render-guided synthesis.

use raddiff_tensor::{Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::denoiser::DenoiserNet;
use crate::diffusion::{estimate_f0, implied_noise, standard_normal};
use crate::error::{Error, Result};
use crate::field::{clamp_field, ActivationConfig, RadianceField, CHANNELS};
use crate::render::{squared_error_sum, Image, RenderConfig};
use crate::schedule::NoiseSchedule;

/// Anything that predicts the noise in `f_t`.
pub trait NoisePredictor {
    fn predict(&self, f_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl NoisePredictor for DenoiserNet {
    fn predict(&self, f_t: &Tensor, t: usize) -> Result<Tensor> {
        self.forward(f_t, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Clip every clean-field estimate to `[−1, 1]` and step with the noise
    /// it implies. Without this, a small denoiser's errors are amplified by
    /// up to `1/√ᾱ_T` over the chain.
    pub clip_estimate: bool,
    /// Clamp the returned field to `[−1, 1]`.
    pub clamp_output: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            clip_estimate: true,
            clamp_output: true,
        }
    }
}

impl SamplerConfig {
    /// The reverse chain exactly as `μ = a_t (f_t − b_t ε_θ)`, unclipped.
    pub fn literal() -> Self {
        Self {
            clip_estimate: false,
            clamp_output: false,
        }
    }

    fn finish(&self, f: RadianceField) -> RadianceField {
        if self.clamp_output {
            clamp_field(&f)
        } else {
            f
        }
    }
}

/// Clean-field estimate at step `t`, clipped if configured.
fn clean_estimate<P: NoisePredictor + ?Sized>(
    net: &P,
    f_t: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<(Tensor, Tensor)> {
    let eps = net.predict(f_t, t)?;
    let mut f0 = estimate_f0(f_t, t, &eps, s)?;
    if cfg.clip_estimate {
        f0 = f0.map(|v| v.clamp(-1.0, 1.0));
    }
    Ok((f0, eps))
}

/// Binary voxel mask; 1 marks the region to generate, 0 the known region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelMask {
    resolution: usize,
    values: Vec<u8>,
}

impl VoxelMask {
    pub fn new(resolution: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != resolution.pow(3) {
            return Err(Error::Dimension(format!(
                "mask of resolution {resolution} needs {} values, got {}",
                resolution.pow(3),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Config(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { resolution, values })
    }

    pub fn filled(resolution: usize, value: bool) -> Self {
        Self {
            resolution,
            values: vec![value as u8; resolution.pow(3)],
        }
    }

    /// Mask from a predicate on voxel-centre positions.
    pub fn from_fn(resolution: usize, f: impl Fn([f64; 3]) -> bool) -> Self {
        let field = RadianceField::zeros(resolution);
        let mut values = Vec::with_capacity(resolution.pow(3));
        for z in 0..resolution {
            for y in 0..resolution {
                for x in 0..resolution {
                    values.push(f(field.vertex_position(z, y, x)) as u8);
                }
            }
        }
        Self { resolution, values }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn is_masked(&self, z: usize, y: usize, x: usize) -> bool {
        self.values[(z * self.resolution + y) * self.resolution + x] == 1
    }

    pub fn masked_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// A posed target image with a foreground mask and guidance weight.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceTarget {
    pub camera: Camera,
    pub image: Image,
    /// Row-major, one flag per pixel.
    pub foreground: Vec<bool>,
    pub lambda: f64,
}

impl GuidanceTarget {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "guidance weight must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.image.width != self.camera.width() || self.image.height != self.camera.height() {
            return Err(Error::Dimension("guidance image does not match its camera".into()));
        }
        if self.foreground.len() != self.image.pixels.len() {
            return Err(Error::Dimension(format!(
                "foreground mask has {} pixels, image has {}",
                self.foreground.len(),
                self.image.pixels.len()
            )));
        }
        Ok(())
    }

    fn pixels(&self) -> Vec<(usize, usize)> {
        let w = self.image.width;
        (0..self.foreground.len())
            .filter(|&i| self.foreground[i])
            .map(|i| (i % w, i / w))
            .collect()
    }
}

fn field_shape(n: usize) -> [usize; 4] {
    [CHANNELS, n, n, n]
}

/// `μ = a_t (f_t − b_t ε)`, plus `√var · z` when `z` is given.
pub fn reverse_step(f_t: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule, z: Option<&Tensor>) -> Result<Tensor> {
    let (a, b, var) = s.reverse_constants(t)?;
    let mut mu = f_t.zip_map(eps, |f, e| a * (f - b * e))?;
    if let Some(z) = z {
        mu.axpy(var.sqrt(), z)?;
    }
    Ok(mu)
}

/// `√ᾱ_t (m ⊙ f̃₀ + (1 − m) ⊙ f_in)`, plus `√(1 − ᾱ_t) · z` when `z` is given.
pub fn completion_step(
    f0_est: &Tensor,
    f_in: &Tensor,
    mask: &VoxelMask,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    s.check_step(t)?;
    let voxels = mask.values.len();
    let scale = s.sqrt_alpha_bar(t);
    let mut out = Tensor::from_fn(f0_est.shape(), |i| {
        let src = if mask.values[i % voxels] == 1 { f0_est } else { f_in };
        scale * src.data()[i]
    });
    if let Some(z) = z {
        out.axpy(s.sqrt_one_minus_alpha_bar(t), z)?;
    }
    Ok(out)
}

fn to_field(t: &Tensor) -> Result<RadianceField> {
    RadianceField::from_tensor(t)
}

/// Ancestral sampling from pure noise with `n³` voxels.
pub fn sample_unconditional<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    s: &NoiseSchedule,
    n: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<RadianceField> {
    let shape = field_shape(n);
    let mut f = standard_normal(&shape, rng);
    for t in (1..=s.steps).rev() {
        let eps = if cfg.clip_estimate {
            let (f0, _) = clean_estimate(net, &f, t, s, cfg)?;
            implied_noise(&f, t, &f0, s)?
        } else {
            net.predict(&f, t)?
        };
        let z = (t > 1).then(|| standard_normal(&shape, rng));
        f = reverse_step(&f, &eps, t, s, z.as_ref())?;
    }
    Ok(cfg.finish(to_field(&f)?))
}

/// Regenerates the masked region of `f_in`, keeping the rest.
///
/// `resample` extra renoise-and-repeat passes per step are taken for
/// `t > 1`; the default procedure uses none. Voxels with `m = 0` of the
/// result equal `f_in` exactly.
pub fn complete_masked<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    s: &NoiseSchedule,
    f_in: &RadianceField,
    mask: &VoxelMask,
    resample: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<RadianceField> {
    let n = f_in.resolution();
    if mask.resolution() != n {
        return Err(Error::Dimension(format!(
            "mask resolution {} does not match field resolution {n}",
            mask.resolution()
        )));
    }
    let shape = field_shape(n);
    let known = f_in.to_tensor();
    let mut f = standard_normal(&shape, rng);
    for t in (1..=s.steps).rev() {
        for r in 0..=resample {
            let (f0_est, _) = clean_estimate(net, &f, t, s, cfg)?;
            let z = (t > 1).then(|| standard_normal(&shape, rng));
            let next = completion_step(&f0_est, &known, mask, t, s, z.as_ref())?;
            if r < resample && t > 1 {
                let z = standard_normal(&shape, rng);
                let (sa, sb) = (s.alpha[t].sqrt(), s.beta[t].sqrt());
                f = next.zip_map(&z, |x, e| sa * x + sb * e)?;
            } else {
                f = next;
                break;
            }
        }
    }
    let mut out = cfg.finish(to_field(&f)?);
    let voxels = n.pow(3);
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        if mask.values[i % voxels] == 0 {
            *v = f_in.values()[i];
        }
    }
    Ok(out)
}

/// Gradient of the foreground-masked squared error (summed over pixels)
/// between a render of `values` and the target image.
pub fn guidance_gradient(
    values: &Tensor,
    target: &GuidanceTarget,
    cfg: &RenderConfig,
    act: &ActivationConfig,
) -> Result<(f64, Tensor)> {
    let pixels = target.pixels();
    if pixels.is_empty() {
        return Ok((0.0, Tensor::zeros(values.shape())));
    }
    let cfg = RenderConfig {
        jitter: false,
        ..cfg.clone()
    };
    let mut tape = Tape::new();
    let f = tape.param(values.clone());
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    let err = squared_error_sum(
        &mut tape,
        f,
        &target.camera,
        &target.image,
        Some(&pixels),
        None,
        &cfg,
        act,
        &mut no_rng,
    )?;
    let mut grads = tape.backward(err)?;
    let value = tape.value(err).item().expect("scalar");
    Ok((value, grads.remove(f).unwrap_or_else(|| Tensor::zeros(values.shape()))))
}

/// Unconditional sampling with each clean estimate nudged down the
/// gradient of the target's photometric error.
///
/// With `lambda = 0` the trajectory is identical to
/// [`sample_unconditional`] under the same random stream.
pub fn sample_guided<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    s: &NoiseSchedule,
    n: usize,
    target: &GuidanceTarget,
    sampler: &SamplerConfig,
    cfg: &RenderConfig,
    act: &ActivationConfig,
    rng: &mut R,
) -> Result<RadianceField> {
    target.validate()?;
    let shape = field_shape(n);
    let mut f = standard_normal(&shape, rng);
    for t in (1..=s.steps).rev() {
        let (mut f0_est, mut eps) = clean_estimate(net, &f, t, s, sampler)?;
        if target.lambda > 0.0 {
            let (_, g) = guidance_gradient(&f0_est, target, cfg, act)?;
            f0_est.axpy(-target.lambda, &g)?;
            eps = implied_noise(&f, t, &f0_est, s)?;
        } else if sampler.clip_estimate {
            eps = implied_noise(&f, t, &f0_est, s)?;
        }
        let z = (t > 1).then(|| standard_normal(&shape, rng));
        f = reverse_step(&f, &eps, t, s, z.as_ref())?;
        if !f.all_finite() {
            return Err(Error::Numerical(format!("guided sample diverged at step {t}")));
        }
    }
    Ok(sampler.finish(to_field(&f)?))
}
