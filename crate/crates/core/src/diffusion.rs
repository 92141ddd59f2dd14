//! Forward corruption, the one-shot clean estimate, the two training losses
//! and the training loop.

use std::collections::BTreeMap;
use std::path::Path;

use raddiff_tensor::{Tape, Tensor, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::all_pixels;
use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::error::{Error, Result};
use crate::field::{ActivationConfig, RadianceField};
use crate::io::{read_archive, write_archive, Scene};
use crate::optim::{Adam, AdamConfig};
use crate::render::{photometric_loss, RenderConfig};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

/// Below this weight the rendering loss is not evaluated at all.
pub const OMEGA_SKIP: f64 = 1e-12;

/// A clean field together with the posed images it was fitted to.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub name: String,
    pub field: RadianceField,
    pub scene: Scene,
}

impl TrainingSample {
    pub fn new(name: impl Into<String>, field: RadianceField, scene: Scene) -> Result<Self> {
        let name = name.into();
        if field.max_abs() > 1.0 {
            return Err(Error::Config(format!(
                "training field {name} has values outside [-1, 1] (max |v| = {})",
                field.max_abs()
            )));
        }
        scene.validate()?;
        Ok(Self { name, field, scene })
    }
}

/// Learning-rate schedule over `iterations` steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero at `iterations`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda_rgb: f64,
    pub views_per_step: usize,
    pub pixels_per_step: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub iterations: usize,
    pub seed: u64,
    /// Decay of an exponential moving average of the weights; `None`
    /// disables it.
    pub ema_decay: Option<f64>,
    pub render: RenderConfig,
    pub activation: ActivationConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_rgb: 1.0,
            views_per_step: 4,
            pixels_per_step: 8192,
            batch_size: 8,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            iterations: 1000,
            seed: 0,
            ema_decay: None,
            render: RenderConfig::default(),
            activation: ActivationConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn learning_rate(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let progress = (step as f64 / self.iterations.max(1) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views_per_step == 0 || self.pixels_per_step == 0 || self.batch_size == 0 {
            return Err(Error::Config("training counts must be positive".into()));
        }
        if !(self.lambda_rgb >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "training needs lambda_rgb >= 0 and lr > 0, got {} and {}",
                self.lambda_rgb, self.lr
            )));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {d}")));
            }
        }
        self.render.validate()?;
        self.activation.validate()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `f_t = √ᾱ_t · f0 + √(1 − ᾱ_t) · eps`.
pub fn forward_diffuse(f0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape("forward_diffuse", f0, eps)?;
    s.check_step(t)?;
    let (a, b) = (s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t));
    Ok(f0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// `f̃₀ = (f_t − √(1 − ᾱ_t) · eps_pred) / √ᾱ_t`.
pub fn estimate_f0(f_t: &Tensor, t: usize, eps_pred: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape("estimate_f0", f_t, eps_pred)?;
    s.check_step(t)?;
    let (a, b) = (s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t));
    Ok(f_t.zip_map(eps_pred, |x, e| (x - b * e) / a)?)
}

/// The noise implied by a clean estimate: `(f_t − √ᾱ_t · f0) / √(1 − ᾱ_t)`.
pub fn implied_noise(f_t: &Tensor, t: usize, f0: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape("implied_noise", f_t, f0)?;
    s.check_step(t)?;
    let (a, b) = (s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t));
    Ok(f_t.zip_map(f0, |x, c| (x - a * c) / b)?)
}

/// [`estimate_f0`] recorded on a tape, differentiable in `eps_pred`.
pub fn estimate_f0_on(tape: &mut Tape, f_t: &Tensor, t: usize, eps_pred: Var, s: &NoiseSchedule) -> Result<Var> {
    s.check_step(t)?;
    let (a, b) = (s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t));
    let base = tape.constant(f_t.scale(1.0 / a));
    let shift = tape.scale(eps_pred, -b / a)?;
    Ok(tape.add(base, shift)?)
}

/// Mean squared difference over all elements.
pub fn loss_rf(eps: &Tensor, eps_pred: &Tensor) -> Result<f64> {
    same_shape("loss_rf", eps, eps_pred)?;
    let se: f64 = eps
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(se / eps.len().max(1) as f64)
}

pub fn loss_rf_on(tape: &mut Tape, eps: &Tensor, eps_pred: Var) -> Result<Var> {
    same_shape("loss_rf", eps, tape.value(eps_pred))?;
    let target = tape.constant(eps.clone());
    let d = tape.sub(eps_pred, target)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}

/// `ω_t` times the mean photometric loss of `f0_est` over randomly drawn
/// views and pixels of `sample`.
#[allow(clippy::too_many_arguments)]
pub fn loss_rgb_on<R: Rng + ?Sized>(
    tape: &mut Tape,
    f0_est: Var,
    sample: &TrainingSample,
    t: usize,
    s: &NoiseSchedule,
    cfg: &TrainingConfig,
    rng: &mut R,
) -> Result<Var> {
    s.check_step(t)?;
    let views = &sample.scene.views;
    if views.is_empty() {
        return Err(Error::Empty(format!("sample {} has no views", sample.name)));
    }
    let k = cfg.views_per_step.min(views.len());
    let render = RenderConfig {
        background: sample.scene.background.unwrap_or(cfg.render.background),
        ..cfg.render.clone()
    };
    let per_view = cfg.pixels_per_step.div_ceil(k);
    let mut total = None;
    for vi in index::sample(rng, views.len(), k).iter() {
        let view = &views[vi];
        let npix = view.image.width * view.image.height;
        let pixels: Vec<(usize, usize)> = if per_view >= npix {
            all_pixels(view.image.width, view.image.height)
        } else {
            index::sample(rng, npix, per_view)
                .iter()
                .map(|i| (i % view.image.width, i / view.image.width))
                .collect()
        };
        let l = photometric_loss(
            tape,
            f0_est,
            &view.camera,
            &view.image,
            Some(&pixels),
            &render,
            &cfg.activation,
            rng,
        )?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.expect("at least one view");
    Ok(tape.scale(total, s.omega[t] / k as f64)?)
}

/// Value-only rendering loss of a clean estimate.
pub fn loss_rgb<R: Rng + ?Sized>(
    f0_est: &Tensor,
    sample: &TrainingSample,
    t: usize,
    s: &NoiseSchedule,
    cfg: &TrainingConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(f0_est.clone());
    let l = loss_rgb_on(&mut tape, f, sample, t, s, cfg, rng)?;
    Ok(tape.value(l).item().expect("scalar loss"))
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Batch-mean loss terms of one training step, before the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_rf: f64,
    pub loss_rgb: f64,
    pub total: f64,
}

/// Per-sample loss and parameter gradients.
pub fn sample_loss<R: Rng + ?Sized>(
    net: &DenoiserNet,
    sample: &TrainingSample,
    t: usize,
    eps: &Tensor,
    s: &NoiseSchedule,
    cfg: &TrainingConfig,
    render_rng: &mut R,
) -> Result<(StepLosses, BTreeMap<String, Tensor>)> {
    let f0 = sample.field.to_tensor();
    let f_t = forward_diffuse(&f0, t, eps, s)?;
    let mut tape = Tape::new();
    let params = net.track(&mut tape);
    let x = tape.constant(f_t.clone());
    let eps_pred = net.forward_on(&mut tape, &params, x, t)?;
    let lrf = loss_rf_on(&mut tape, eps, eps_pred)?;
    let mut losses = StepLosses {
        loss_rf: tape.value(lrf).item().expect("scalar"),
        ..Default::default()
    };
    let mut total = lrf;
    if cfg.lambda_rgb > 0.0 && s.omega[t] > OMEGA_SKIP {
        let f0_est = estimate_f0_on(&mut tape, &f_t, t, eps_pred, s)?;
        let lrgb = loss_rgb_on(&mut tape, f0_est, sample, t, s, cfg, render_rng)?;
        losses.loss_rgb = tape.value(lrgb).item().expect("scalar");
        let weighted = tape.scale(lrgb, cfg.lambda_rgb)?;
        total = tape.add(total, weighted)?;
    }
    losses.total = tape.value(total).item().expect("scalar");
    let mut grads = tape.backward(total)?;
    let named = params
        .into_iter()
        .filter_map(|(k, v)| grads.remove(v).map(|g| (k, g)))
        .collect();
    Ok((losses, named))
}

/// Denoiser, optimizer and random streams of a training run.
///
/// Timesteps, noise and batch composition come from the main stream; view
/// and pixel choices for the rendering loss come from a separate stream so
/// that runs differing only in `lambda_rgb` see identical noise.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: DenoiserNet,
    pub adam: Adam,
    pub schedule: NoiseSchedule,
    pub config: TrainingConfig,
    pub step: usize,
    /// Moving average of `net.params`, present when `ema_decay` is set.
    pub ema: Option<BTreeMap<String, Tensor>>,
    rng: ChaCha8Rng,
    render_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(net: DenoiserNet, schedule: NoiseSchedule, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut render_rng = rng.clone();
        render_rng.set_stream(1);
        let ema = config.ema_decay.map(|_| net.params.clone());
        Ok(Self {
            net,
            adam: Adam::new(AdamConfig::with_lr(config.lr)),
            schedule,
            config,
            step: 0,
            ema,
            rng,
            render_rng,
        })
    }

    /// One optimizer step on `batch`: each sample gets its own `t` and noise,
    /// losses are averaged over the batch. Returns the pre-update losses.
    pub fn train_step(&mut self, batch: &[&TrainingSample]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch is empty".into()));
        }
        let inv = 1.0 / batch.len() as f64;
        let mut mean = StepLosses::default();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for sample in batch {
            let t = self.rng.gen_range(1..=self.schedule.steps);
            let eps = standard_normal(&sample.field.to_tensor().shape().to_vec(), &mut self.rng);
            let (l, g) = sample_loss(
                &self.net,
                sample,
                t,
                &eps,
                &self.schedule,
                &self.config,
                &mut self.render_rng,
            )?;
            mean.loss_rf += l.loss_rf * inv;
            mean.loss_rgb += l.loss_rgb * inv;
            mean.total += l.total * inv;
            for (k, gk) in g {
                match grads.get_mut(&k) {
                    Some(acc) => acc.axpy(inv, &gk)?,
                    None => {
                        grads.insert(k, gk.scale(inv));
                    }
                }
            }
        }
        if !mean.total.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss became {} at step {}",
                mean.total, self.step
            )));
        }
        self.adam.config.lr = self.config.learning_rate(self.step);
        self.adam.update(&mut self.net.params, &grads);
        if let (Some(ema), Some(d)) = (self.ema.as_mut(), self.config.ema_decay) {
            for (k, avg) in ema.iter_mut() {
                for (a, p) in avg.data_mut().iter_mut().zip(self.net.params[k].data()) {
                    *a = d * *a + (1.0 - d) * p;
                }
            }
        }
        self.step += 1;
        Ok(mean)
    }

    /// The weights to sample with: the moving average when enabled.
    pub fn sampling_net(&self) -> DenoiserNet {
        match &self.ema {
            Some(ema) => DenoiserNet {
                config: self.net.config.clone(),
                params: ema.clone(),
            },
            None => self.net.clone(),
        }
    }

    /// Draws a batch of `batch_size` samples uniformly with replacement and
    /// takes one step.
    pub fn step_on(&mut self, data: &[TrainingSample]) -> Result<StepLosses> {
        if data.is_empty() {
            return Err(Error::Empty("training set is empty".into()));
        }
        let batch: Vec<&TrainingSample> = (0..self.config.batch_size)
            .map(|_| &data[self.rng.gen_range(0..data.len())])
            .collect();
        self.train_step(&batch)
    }

    /// Saves parameters, Adam moments, schedule and random-stream positions.
    pub fn save(&self, path: &Path) -> Result<()> {
        let rng_state = |r: &ChaCha8Rng| {
            serde_json::json!({
                "seed": r.get_seed(),
                "stream": r.get_stream().to_string(),
                "word_pos": r.get_word_pos().to_string(),
            })
        };
        let header = serde_json::json!({
            "kind": "trainer",
            "config": self.net.config,
            "training": self.config,
            "schedule": self.schedule.config(),
            "adam": { "config": self.adam.config, "step": self.adam.step },
            "step": self.step,
            "rng": rng_state(&self.rng),
            "render_rng": rng_state(&self.render_rng),
        });
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (k, v) in &self.net.params {
            tensors.push((format!("param/{k}"), v));
        }
        for (k, v) in &self.adam.first {
            tensors.push((format!("adam_m/{k}"), v));
        }
        for (k, v) in &self.adam.second {
            tensors.push((format!("adam_v/{k}"), v));
        }
        for (k, v) in self.ema.iter().flatten() {
            tensors.push((format!("ema/{k}"), v));
        }
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        write_archive(path, &header, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = read_archive(path)?;
        let bad = |reason: String| Error::FieldFormat {
            path: path.to_path_buf(),
            reason,
        };
        if header["kind"] != "trainer" {
            return Err(bad("not a trainer checkpoint".into()));
        }
        let parse = |key: &str| header[key].clone();
        let config: DenoiserConfig = serde_json::from_value(parse("config")).map_err(|e| bad(e.to_string()))?;
        let training: TrainingConfig = serde_json::from_value(parse("training")).map_err(|e| bad(e.to_string()))?;
        let sched: ScheduleConfig = serde_json::from_value(parse("schedule")).map_err(|e| bad(e.to_string()))?;
        let adam_cfg: AdamConfig =
            serde_json::from_value(header["adam"]["config"].clone()).map_err(|e| bad(e.to_string()))?;
        let restore = |v: &serde_json::Value| -> Result<ChaCha8Rng> {
            let seed: [u8; 32] = serde_json::from_value(v["seed"].clone()).map_err(|e| bad(e.to_string()))?;
            let num = |k: &str| -> Result<u128> {
                v[k].as_str()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("bad rng {k}")))
            };
            let mut r = ChaCha8Rng::from_seed(seed);
            r.set_stream(num("stream")? as u64);
            r.set_word_pos(num("word_pos")?);
            Ok(r)
        };
        let mut params = BTreeMap::new();
        let mut ema = BTreeMap::new();
        let mut adam = Adam::new(adam_cfg);
        adam.step = header["adam"]["step"]
            .as_u64()
            .ok_or_else(|| bad("missing adam step".into()))?;
        for (k, v) in tensors {
            if let Some(n) = k.strip_prefix("param/") {
                params.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("adam_m/") {
                adam.first.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("adam_v/") {
                adam.second.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("ema/") {
                ema.insert(n.to_string(), v);
            }
        }
        let net = DenoiserNet::from_params(config, params).map_err(|e| bad(e.to_string()))?;
        let ema = match training.ema_decay {
            Some(_) if ema.len() == net.params.len() => Some(ema),
            Some(_) => return Err(bad("moving-average weights missing or incomplete".into())),
            None => None,
        };
        Ok(Self {
            net,
            adam,
            schedule: sched.build()?,
            config: training,
            step: header["step"].as_u64().ok_or_else(|| bad("missing step".into()))? as usize,
            ema,
            rng: restore(&header["rng"])?,
            render_rng: restore(&header["render_rng"])?,
        })
    }
}

/// Mean denoising loss of `net` over `draws` random `(sample, t, ε)`
/// triples with `t` uniform in `1..=t_max`.
pub fn mean_loss_rf(
    net: &DenoiserNet,
    data: &[TrainingSample],
    s: &NoiseSchedule,
    t_max: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || draws == 0 {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let t_max = t_max.clamp(1, s.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let sample = &data[rng.gen_range(0..data.len())];
        let t = rng.gen_range(1..=t_max);
        let f0 = sample.field.to_tensor();
        let eps = standard_normal(f0.shape(), &mut rng);
        let f_t = forward_diffuse(&f0, t, &eps, s)?;
        total += loss_rf(&eps, &net.forward(&f_t, t)?)?;
    }
    Ok(total / draws as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::linear_schedule;

    #[test]
    fn zero_noise_scales_clean_field() {
        let s = linear_schedule(0.0015, 0.05, 1000).unwrap();
        let f0 = Tensor::from_fn(&[4, 2, 2, 2], |i| i as f64 / 16.0 - 1.0);
        let ft = forward_diffuse(&f0, 300, &Tensor::zeros(f0.shape()), &s).unwrap();
        for (a, b) in ft.data().iter().zip(f0.data()) {
            assert!((a - s.sqrt_alpha_bar(300) * b).abs() < 1e-15);
        }
    }

    #[test]
    fn estimate_inverts_diffusion_at_every_step() {
        let s = linear_schedule(0.0015, 0.05, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f0 = Tensor::from_fn(&[4, 2, 2, 2], |i| (i as f64 * 0.7).sin());
        let eps = standard_normal(f0.shape(), &mut rng);
        for t in [1, 2, 100, 500, 999, 1000] {
            let ft = forward_diffuse(&f0, t, &eps, &s).unwrap();
            let back = estimate_f0(&ft, t, &eps, &s).unwrap();
            assert!(back.max_abs_diff(&f0).unwrap() < 1e-5, "t = {t}");
            let e = implied_noise(&ft, t, &f0, &s).unwrap();
            assert!(e.max_abs_diff(&eps).unwrap() < 1e-6);
        }
    }

    #[test]
    fn loss_rf_examples() {
        let z = Tensor::zeros(&[4, 2, 2, 2]);
        let o = Tensor::ones(&[4, 2, 2, 2]);
        assert_eq!(loss_rf(&z, &z).unwrap(), 0.0);
        assert_eq!(loss_rf(&z, &o).unwrap(), 1.0);
        assert!(loss_rf(&z, &Tensor::zeros(&[3])).is_err());
    }
}
