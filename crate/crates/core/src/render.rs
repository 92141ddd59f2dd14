//! Differentiable volume rendering of voxel radiance fields.
//!
//! Each ray is marched with `n_steps` uniformly spaced samples over its
//! chord through the domain, `s_i = t_near + (i + u)·δ` with `δ = L / n_steps`
//! and `u = 0` (or a per-ray stratified offset when jittering). Samples are
//! alpha-composited front to back and the residual transmittance shows the
//! background.

use std::path::Path;

use raddiff_tensor::{CustomOp, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{all_pixels, pixel_rays, Camera, Ray};
use crate::error::{Error, Result};
use crate::field::{ActivationConfig, Corners, RadianceField, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub n_steps: usize,
    pub background: [f64; 3],
    pub jitter: bool,
    /// Stop marching once transmittance drops below 1e-4. Only honoured by
    /// the non-differentiable paths.
    pub early_stop: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_steps: 92,
            background: [1.0; 3],
            jitter: false,
            early_stop: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::Config(format!(
                "n_steps must be at least 2, got {}",
                self.n_steps
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!(
                "background {:?} outside [0, 1]",
                self.background
            )));
        }
        Ok(())
    }
}

const EARLY_STOP_TRANSMITTANCE: f64 = 1e-4;

/// An RGB image with values in `[0, 1]`, pixels in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        self.pixels[v * self.width + u]
    }

    /// Planar `[3, H, W]` layout.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| self.pixels[i % (w * h)][i / (w * h)])
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Image::new(w as usize, h as usize, pixels)
    }

    /// Values are stored linearly scaled to 0–255 (no transfer function).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (p, rgb) in buf.pixels_mut().zip(&self.pixels) {
            for c in 0..3 {
                p[c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Image quantized the way [`Image::save_png`] stores it.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayOutput {
    pub color: [f64; 3],
    /// `1 − T_final`.
    pub alpha: f64,
    /// Weight-normalized expected termination distance along the ray.
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub image: Image,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Checks a `[4, N, N, N]` tensor and returns `N`.
pub fn field_resolution(t: &Tensor) -> Result<usize> {
    match *t.shape() {
        [CHANNELS, a, b, c] if a == b && b == c => Ok(a),
        _ => Err(Error::Dimension(format!(
            "expected a [4, N, N, N] field, got {:?}",
            t.shape()
        ))),
    }
}

struct Sample {
    corners: Corners,
    dsigma: f64,
    color: [f64; 3],
    dcolor: [f64; 3],
    alpha: f64,
}

fn march(values: &[f64], n: usize, ray: &Ray, offset: f64, cfg: &RenderConfig, act: &ActivationConfig) -> Vec<Sample> {
    let delta = ray.length() / cfg.n_steps as f64;
    let mut out = Vec::with_capacity(cfg.n_steps);
    for i in 0..cfg.n_steps {
        let s = ray.t_near + (i as f64 + offset) * delta;
        let p = ray.at(s).map(|c| c.clamp(-1.0, 1.0));
        let corners = Corners::locate(n, p).expect("clamped point lies in the domain");
        let pre = corners.gather(values, n);
        let sigma = act.density(pre[0]);
        out.push(Sample {
            corners,
            dsigma: act.density_grad(pre[0]),
            color: [act.color(pre[1]), act.color(pre[2]), act.color(pre[3])],
            dcolor: [act.color_grad(pre[1]), act.color_grad(pre[2]), act.color_grad(pre[3])],
            alpha: 1.0 - (-sigma * delta).exp(),
        });
    }
    out
}

/// Composites one ray through a `[4, N, N, N]` value buffer.
pub fn render_ray(
    values: &[f64],
    n: usize,
    ray: &Ray,
    offset: f64,
    cfg: &RenderConfig,
    act: &ActivationConfig,
) -> RayOutput {
    if !ray.hit {
        return RayOutput {
            color: cfg.background,
            alpha: 0.0,
            depth: 0.0,
        };
    }
    let delta = ray.length() / cfg.n_steps as f64;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth_acc = 0.0;
    for i in 0..cfg.n_steps {
        let s = ray.t_near + (i as f64 + offset) * delta;
        let p = ray.at(s).map(|c| c.clamp(-1.0, 1.0));
        let corners = Corners::locate(n, p).expect("clamped point lies in the domain");
        let pre = corners.gather(values, n);
        let alpha = 1.0 - (-act.density(pre[0]) * delta).exp();
        let w = trans * alpha;
        for c in 0..3 {
            color[c] += w * act.color(pre[c + 1]);
        }
        depth_acc += w * s;
        trans *= 1.0 - alpha;
        if cfg.early_stop && trans < EARLY_STOP_TRANSMITTANCE {
            break;
        }
    }
    for c in 0..3 {
        color[c] += trans * cfg.background[c];
    }
    let alpha = 1.0 - trans;
    RayOutput {
        color,
        alpha,
        depth: depth_acc / alpha.max(1e-10),
    }
}

/// Per-ray stratified offsets in `[0, 1)`, or zeros without jitter.
pub fn ray_offsets<R: Rng + ?Sized>(count: usize, cfg: &RenderConfig, rng: &mut R) -> Vec<f64> {
    if cfg.jitter {
        (0..count).map(|_| rng.gen::<f64>()).collect()
    } else {
        vec![0.0; count]
    }
}

/// Renders every pixel of `cam` from a `[4, N, N, N]` value tensor.
pub fn render_image_values(
    values: &Tensor,
    cam: &Camera,
    cfg: &RenderConfig,
    act: &ActivationConfig,
) -> Result<RenderedImage> {
    let n = field_resolution(values)?;
    let rays = pixel_rays(cam, &all_pixels(cam.width(), cam.height()))?;
    let mut pixels = Vec::with_capacity(rays.len());
    let mut alpha = Vec::with_capacity(rays.len());
    let mut depth = Vec::with_capacity(rays.len());
    for r in &rays {
        let o = render_ray(values.data(), n, r, 0.0, cfg, act);
        pixels.push(o.color);
        alpha.push(o.alpha);
        depth.push(o.depth);
    }
    Ok(RenderedImage {
        image: Image::new(cam.width(), cam.height(), pixels)?,
        alpha,
        depth,
    })
}

pub fn render_image(
    f: &RadianceField,
    cam: &Camera,
    cfg: &RenderConfig,
    act: &ActivationConfig,
) -> Result<RenderedImage> {
    render_image_values(&f.to_tensor(), cam, cfg, act)
}

struct RenderOp {
    resolution: usize,
    rays: Vec<Ray>,
    offsets: Vec<f64>,
    cfg: RenderConfig,
    act: ActivationConfig,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render_rays"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let field = inputs[0];
        let n = self.resolution;
        let mut gfield = Tensor::zeros(field.shape());
        for (r, (ray, &off)) in self.rays.iter().zip(&self.offsets).enumerate() {
            let g = [grad.data()[3 * r], grad.data()[3 * r + 1], grad.data()[3 * r + 2]];
            if !ray.hit || g == [0.0; 3] {
                continue;
            }
            ray_backward(field.data(), n, ray, off, &self.cfg, &self.act, g, gfield.data_mut());
        }
        vec![Some(gfield)]
    }
}

/// Accumulates d(g · color)/d(values) for one ray into `out`.
#[allow(clippy::too_many_arguments)]
fn ray_backward(
    values: &[f64],
    n: usize,
    ray: &Ray,
    offset: f64,
    cfg: &RenderConfig,
    act: &ActivationConfig,
    g: [f64; 3],
    out: &mut [f64],
) {
    let delta = ray.length() / cfg.n_steps as f64;
    let samples = march(values, n, ray, offset, cfg, act);
    // transmittance before each sample
    let mut trans = Vec::with_capacity(samples.len() + 1);
    let mut t = 1.0;
    for s in &samples {
        trans.push(t);
        t *= 1.0 - s.alpha;
    }
    trans.push(t);
    // suffix: Σ_{j>i} w_j c_j + T_final · bg
    let mut suffix = [0.0; 3];
    for c in 0..3 {
        suffix[c] = t * cfg.background[c];
    }
    for i in (0..samples.len()).rev() {
        let s = &samples[i];
        let w = trans[i] * s.alpha;
        // dC/dσ_i = δ (T_{i+1} c_i − suffix_i)
        let mut dsigma = 0.0;
        let mut grad_pre = [0.0; CHANNELS];
        for c in 0..3 {
            dsigma += g[c] * delta * (trans[i + 1] * s.color[c] - suffix[c]);
            grad_pre[c + 1] = g[c] * w * s.dcolor[c];
            suffix[c] += w * s.color[c];
        }
        grad_pre[0] = dsigma * s.dsigma;
        s.corners.scatter(grad_pre, n, out);
    }
}

/// Records differentiable rendering of `rays` through `field`
/// (`[4, N, N, N]`); the result is `[rays, 3]` composited colour.
pub fn render_rays(
    tape: &mut Tape,
    field: Var,
    rays: Vec<Ray>,
    offsets: Vec<f64>,
    cfg: &RenderConfig,
    act: &ActivationConfig,
) -> Result<Var> {
    let values = tape.value(field);
    let n = field_resolution(values)?;
    if offsets.len() != rays.len() {
        return Err(Error::Dimension(format!(
            "{} offsets for {} rays",
            offsets.len(),
            rays.len()
        )));
    }
    if rays.is_empty() {
        return Err(Error::Empty("no rays to render".into()));
    }
    let mut out = Vec::with_capacity(rays.len() * 3);
    for (r, &o) in rays.iter().zip(&offsets) {
        out.extend_from_slice(
            &render_ray(
                values.data(),
                n,
                r,
                o,
                &RenderConfig {
                    early_stop: false,
                    ..cfg.clone()
                },
                act,
            )
            .color,
        );
    }
    let output = Tensor::new(&[rays.len(), 3], out)?;
    let op = RenderOp {
        resolution: n,
        rays,
        offsets,
        cfg: cfg.clone(),
        act: *act,
    };
    Ok(tape.custom(&[field], output, Box::new(op))?)
}

/// Mean over pixels of the squared RGB error between a render of `field`
/// and `target`, restricted to `pixels` when given.
#[allow(clippy::too_many_arguments)]
pub fn photometric_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    field: Var,
    cam: &Camera,
    target: &Image,
    pixels: Option<&[(usize, usize)]>,
    cfg: &RenderConfig,
    act: &ActivationConfig,
    rng: &mut R,
) -> Result<Var> {
    let sq = squared_error_sum(tape, field, cam, target, pixels, None, cfg, act, rng)?;
    let count = pixels.map_or(cam.pixel_count(), |p| p.len());
    Ok(tape.scale(sq, 1.0 / count as f64)?)
}

/// Sum over pixels of squared RGB error, optionally weighting each pixel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn squared_error_sum<R: Rng + ?Sized>(
    tape: &mut Tape,
    field: Var,
    cam: &Camera,
    target: &Image,
    pixels: Option<&[(usize, usize)]>,
    weights: Option<&[f64]>,
    cfg: &RenderConfig,
    act: &ActivationConfig,
    rng: &mut R,
) -> Result<Var> {
    if target.width != cam.width() || target.height != cam.height() {
        return Err(Error::Dimension(format!(
            "target image {}x{} does not match camera {}x{}",
            target.width,
            target.height,
            cam.width(),
            cam.height()
        )));
    }
    let owned;
    let pixels = match pixels {
        Some(p) => p,
        None => {
            owned = all_pixels(cam.width(), cam.height());
            &owned
        }
    };
    let rays = pixel_rays(cam, pixels)?;
    let offsets = ray_offsets(rays.len(), cfg, rng);
    let rendered = render_rays(tape, field, rays, offsets, cfg, act)?;
    let mut tdata = Vec::with_capacity(pixels.len() * 3);
    for &(u, v) in pixels {
        tdata.extend_from_slice(&target.get(u, v));
    }
    let tgt = tape.constant(Tensor::new(&[pixels.len(), 3], tdata)?);
    let diff = tape.sub(rendered, tgt)?;
    let sq = tape.square(diff)?;
    let sq = match weights {
        Some(w) => {
            let mut wd = Vec::with_capacity(w.len() * 3);
            for &x in w {
                wd.extend_from_slice(&[x, x, x]);
            }
            let wv = tape.constant(Tensor::new(&[pixels.len(), 3], wd)?);
            tape.mul(sq, wv)?
        }
        None => sq,
    };
    Ok(tape.sum(sq)?)
}

/// Value-only [`photometric_loss`] without jitter.
pub fn photometric_error(
    f: &RadianceField,
    cam: &Camera,
    target: &Image,
    cfg: &RenderConfig,
    act: &ActivationConfig,
) -> Result<f64> {
    let img = render_image(f, cam, cfg, act)?;
    if target.width != cam.width() || target.height != cam.height() {
        return Err(Error::Dimension("target does not match camera".into()));
    }
    let total: f64 = img
        .image
        .pixels
        .iter()
        .zip(&target.pixels)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(total / cam.pixel_count() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Ray;

    fn no_rng() -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn empty_space_shows_background() {
        let act = ActivationConfig::default();
        // pre-density −∞ is not representable; use a tiny scale instead
        let act = ActivationConfig {
            density_scale: 1e-300,
            ..act
        };
        let f = RadianceField::zeros(4).to_tensor();
        let cfg = RenderConfig::default();
        let r = Ray::new([0.0, 0.0, 2.5], [0.0, 0.0, -1.0]);
        let o = render_ray(f.data(), 4, &r, 0.0, &cfg, &act);
        assert_eq!(o.color, cfg.background);
        assert_eq!(o.alpha, 0.0);
    }

    #[test]
    fn miss_returns_background() {
        let f = RadianceField::filled(4, [1.0; 4]).to_tensor();
        let cfg = RenderConfig {
            background: [0.2, 0.3, 0.4],
            ..Default::default()
        };
        let r = Ray::new([0.0, 0.0, 2.5], [0.0, 0.0, 1.0]);
        let o = render_ray(f.data(), 4, &r, 0.0, &cfg, &ActivationConfig::default());
        assert_eq!(o.color, [0.2, 0.3, 0.4]);
        assert_eq!(o.alpha, 0.0);
    }

    #[test]
    fn opaque_front_sample_shows_surface_color() {
        let f = RadianceField::filled(4, [1.0, 1.0, -1.0, -1.0]).to_tensor();
        let act = ActivationConfig {
            density_scale: 1e4,
            ..Default::default()
        };
        let r = Ray::new([0.0, 0.0, 2.5], [0.0, 0.0, -1.0]);
        let o = render_ray(f.data(), 4, &r, 0.0, &RenderConfig::default(), &act);
        assert!((o.alpha - 1.0).abs() < 1e-12);
        assert!((o.color[0] - 1.0).abs() < 1e-12 && o.color[1].abs() < 1e-12);
        assert!((o.depth - 1.5).abs() < 1e-9);
    }

    #[test]
    fn target_equal_to_own_render_has_zero_loss() {
        let f = RadianceField::filled(3, [0.1, 0.4, -0.2, 0.0]);
        let cam = Camera::look_at([0.0, -2.5, 0.5], [0.0; 3], 6.0, 6, 5).unwrap();
        let cfg = RenderConfig::default();
        let act = ActivationConfig::default();
        let target = render_image(&f, &cam, &cfg, &act).unwrap().image;
        let mut tape = Tape::new();
        let fv = tape.param(f.to_tensor());
        let l = photometric_loss(&mut tape, fv, &cam, &target, None, &cfg, &act, &mut no_rng()).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-24);
    }

    #[test]
    fn black_render_against_white_target() {
        let f = RadianceField::filled(3, [1.0, -1.0, -1.0, -1.0]);
        let act = ActivationConfig {
            density_scale: 1e5,
            ..Default::default()
        };
        let cam = Camera::look_at([0.0, 0.0, 2.5], [0.0; 3], 30.0, 5, 5).unwrap();
        let cfg = RenderConfig::default();
        let target = Image::filled(5, 5, [1.0; 3]);
        let pix = [(1, 1), (2, 2), (3, 2)];
        let mut tape = Tape::new();
        let fv = tape.param(f.to_tensor());
        let l = photometric_loss(&mut tape, fv, &cam, &target, Some(&pix), &cfg, &act, &mut no_rng()).unwrap();
        assert!((tape.value(l).item().unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn target_size_mismatch() {
        let f = RadianceField::zeros(2);
        let cam = Camera::look_at([0.0, 0.0, 2.5], [0.0; 3], 4.0, 4, 4).unwrap();
        let mut tape = Tape::new();
        let fv = tape.param(f.to_tensor());
        let err = photometric_loss(
            &mut tape,
            fv,
            &cam,
            &Image::filled(3, 4, [0.0; 3]),
            None,
            &RenderConfig::default(),
            &ActivationConfig::default(),
            &mut no_rng(),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
