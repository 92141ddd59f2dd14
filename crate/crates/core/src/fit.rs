//! Per-object voxel fitting from posed images.

use std::collections::BTreeMap;

use raddiff_tensor::{Tape, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::all_pixels;
use crate::error::{Error, Result};
use crate::field::{clamp_field, ActivationConfig, RadianceField};
use crate::io::Scene;
use crate::optim::{Adam, AdamConfig};
use crate::render::{photometric_loss, Image, RenderConfig};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub pixels_per_step: usize,
    pub views_per_step: usize,
    pub tv_weight: f64,
    pub resolution: usize,
    pub render: RenderConfig,
    pub activation: ActivationConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.1,
            pixels_per_step: 8192,
            views_per_step: 4,
            tv_weight: 1e-4,
            resolution: 32,
            render: RenderConfig::default(),
            activation: ActivationConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.pixels_per_step == 0 || self.views_per_step == 0 || self.resolution == 0 {
            return Err(Error::Config("fit counts must be positive".into()));
        }
        if !(self.lr > 0.0) || self.tv_weight < 0.0 {
            return Err(Error::Config(format!(
                "fit needs lr > 0 and tv_weight >= 0, got {} and {}",
                self.lr, self.tv_weight
            )));
        }
        self.render.validate()?;
        self.activation.validate()
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub field: RadianceField,
    /// Total minibatch loss per iteration.
    pub losses: Vec<f64>,
}

/// Mean squared difference of neighbouring voxels along each axis, summed
/// over axes, and its gradient.
pub fn total_variation(values: &Tensor) -> (f64, Tensor) {
    let s = values.shape();
    let (c, n) = (s[0], s[1]);
    let d = values.data();
    let mut grad = Tensor::zeros(s);
    let g = grad.data_mut();
    let pairs = (c * n * n * (n - 1)).max(1) as f64;
    let mut total = 0.0;
    for stride in [1, n, n * n] {
        for ch in 0..c {
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        let coord = match stride {
                            1 => x,
                            s if s == n => y,
                            _ => z,
                        };
                        if coord + 1 >= n {
                            continue;
                        }
                        let i = ((ch * n + z) * n + y) * n + x;
                        let diff = d[i + stride] - d[i];
                        total += diff * diff / pairs;
                        g[i + stride] += 2.0 * diff / pairs;
                        g[i] -= 2.0 * diff / pairs;
                    }
                }
            }
        }
    }
    (total, grad)
}

/// Fits a field to a posed image set by minibatch photometric descent.
///
/// The field starts at zero pre-activation, is projected onto `[-1, 1]`
/// after every update, and is deterministic given `seed`.
pub fn fit_field(scene: &Scene, cfg: &FitConfig, seed: u64) -> Result<FitResult> {
    cfg.validate()?;
    scene.validate()?;
    if scene.views.len() < 2 {
        return Err(Error::Empty(format!(
            "fitting needs at least 2 views, got {}",
            scene.views.len()
        )));
    }
    let render = RenderConfig {
        background: scene.background.unwrap_or(cfg.render.background),
        ..cfg.render.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.resolution;
    let mut params = BTreeMap::from([("field".to_string(), RadianceField::zeros(n).to_tensor())]);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let views = cfg.views_per_step.min(scene.views.len());
    let mut losses = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let mut tape = Tape::new();
        let fv = tape.param(params["field"].clone());
        let chosen = index::sample(&mut rng, scene.views.len(), views);
        let per_view = cfg.pixels_per_step.div_ceil(views);
        let mut total = None;
        for vi in chosen.iter() {
            let view = &scene.views[vi];
            let pixels = sample_pixels(&view.image, per_view, &mut rng);
            let l = photometric_loss(
                &mut tape,
                fv,
                &view.camera,
                &view.image,
                Some(&pixels),
                &render,
                &cfg.activation,
                &mut rng,
            )?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = tape.scale(total.expect("at least one view"), 1.0 / views as f64)?;
        let mut grads = tape.backward(total)?;
        let mut g = grads.remove(fv).expect("field gradient");
        let mut loss = tape.value(total).item().expect("scalar loss");
        if cfg.tv_weight > 0.0 {
            let (tv, tv_grad) = total_variation(&params["field"]);
            loss += cfg.tv_weight * tv;
            g.axpy(cfg.tv_weight, &tv_grad)?;
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("fitting loss became {loss}")));
        }
        losses.push(loss);
        opt.update(&mut params, &BTreeMap::from([("field".to_string(), g)]));
        let p = params.get_mut("field").expect("field param");
        p.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    let field = clamp_field(&RadianceField::from_tensor(&params["field"])?);
    Ok(FitResult { field, losses })
}

fn sample_pixels(img: &Image, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total = img.width * img.height;
    if count >= total {
        return all_pixels(img.width, img.height);
    }
    index::sample(rng, total, count)
        .iter()
        .map(|i| (i % img.width, i / img.width))
        .collect()
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "psnr of {}x{} and {}x{} images",
            a.width, a.height, b.width, b.height
        )));
    }
    let se: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(psnr_from_mse(se / (3 * a.pixels.len()) as f64))
}
