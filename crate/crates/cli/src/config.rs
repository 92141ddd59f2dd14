//! Run configuration: a flat JSON object from `--config`, then `--set`
//! pairs, then named flags, deserialized into a per-command struct that
//! rejects unknown keys.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use raddiff_core::{
    ActivationConfig, DenoiserConfig, FitConfig, LrSchedule, RenderConfig, ReverseVariance, SamplerConfig,
    ScheduleConfig, TrainingConfig,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Bad invocation: exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Sources of configuration, lowest precedence first.
#[derive(Debug, Default)]
pub struct Sources {
    pub file: Option<PathBuf>,
    pub sets: Vec<String>,
    pub flags: Vec<(&'static str, Value)>,
}

impl Sources {
    pub fn flag(&mut self, key: &'static str, value: Option<impl Serialize>) {
        if let Some(v) = value {
            self.flags
                .push((key, serde_json::to_value(v).expect("flag values serialize")));
        }
    }

    fn merged(&self) -> Result<Map<String, Value>> {
        let mut map = match &self.file {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(usage(format!("{}: config must be a JSON object", path.display()))),
                    Err(e) => return Err(usage(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        for pair in &self.sets {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            // bare words are taken as strings so `--set lr_schedule=cosine` works
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            map.insert(key.trim().to_string(), value);
        }
        for (key, value) in &self.flags {
            map.insert((*key).to_string(), value.clone());
        }
        Ok(map)
    }

    pub fn resolve<T: DeserializeOwned + Serialize>(&self) -> Result<T> {
        let map = self.merged()?;
        let cfg: T =
            serde_json::from_value(Value::Object(map)).map_err(|e| usage(format!("invalid configuration: {e}")))?;
        log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
        Ok(cfg)
    }
}

pub fn write_config<T: Serialize>(path: &Path, cfg: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Where a single-file output's resolved config goes: `x.vrf` → `x.config.json`.
pub fn config_beside(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

/// Keys shared by every command that renders or activates a field.
macro_rules! render_keys {
    ($name:ident { $($field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Clone, Debug, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            $(pub $field: $ty,)*
            pub n_steps: usize,
            pub background: [f64; 3],
            pub jitter: bool,
            pub density_scale: f64,
            pub density_sharpness: f64,
        }

        impl Default for $name {
            fn default() -> Self {
                let (r, a) = (RenderConfig::default(), ActivationConfig::default());
                Self {
                    $($field: $default,)*
                    n_steps: r.n_steps,
                    background: r.background,
                    jitter: r.jitter,
                    density_scale: a.density_scale,
                    density_sharpness: a.density_sharpness,
                }
            }
        }

        #[allow(dead_code)]
        impl $name {
            pub fn render(&self) -> RenderConfig {
                RenderConfig {
                    n_steps: self.n_steps,
                    background: self.background,
                    jitter: self.jitter,
                    ..RenderConfig::default()
                }
            }

            pub fn activation(&self) -> ActivationConfig {
                ActivationConfig {
                    density_scale: self.density_scale,
                    density_sharpness: self.density_sharpness,
                    ..ActivationConfig::default()
                }
            }
        }
    };
}

render_keys!(FitRun {
    seed: u64 = 0,
    resolution: usize = FitConfig::default().resolution,
    iterations: usize = FitConfig::default().iterations,
    lr: f64 = FitConfig::default().lr,
    pixels_per_step: usize = FitConfig::default().pixels_per_step,
    views_per_step: usize = FitConfig::default().views_per_step,
    tv_weight: f64 = FitConfig::default().tv_weight,
});

render_keys!(TrainRun {
    seed: u64 = 0,
    resolution: Option<usize> = None,
    iterations: usize = TrainingConfig::default().iterations,
    lr: f64 = TrainingConfig::default().lr,
    lr_schedule: LrSchedule = LrSchedule::Constant,
    lambda_rgb: f64 = TrainingConfig::default().lambda_rgb,
    batch_size: usize = TrainingConfig::default().batch_size,
    views_per_step: usize = TrainingConfig::default().views_per_step,
    pixels_per_step: usize = TrainingConfig::default().pixels_per_step,
    ema_decay: Option<f64> = None,
    checkpoint_every: usize = 500,
    log_every: usize = 50,
    base_channels: usize = DenoiserConfig::default().base_channels,
    channel_multipliers: Vec<usize> = DenoiserConfig::default().channel_multipliers,
    resnet_blocks_per_level: usize = DenoiserConfig::default().resnet_blocks_per_level,
    attention_levels: Vec<usize> = DenoiserConfig::default().attention_levels,
    attention_head_channels: usize = DenoiserConfig::default().attention_head_channels,
    time_embed_dim: Option<usize> = None,
    beta_start: f64 = ScheduleConfig::default().beta_start,
    beta_end: f64 = ScheduleConfig::default().beta_end,
    steps: usize = ScheduleConfig::default().steps,
    variance: ReverseVariance = ScheduleConfig::default().variance,
});

render_keys!(SampleRun {
    seed: u64 = 0,
    count: usize = 1,
    resolution: Option<usize> = None,
    variance: Option<ReverseVariance> = None,
    clip_estimate: bool = true,
    clamp_output: bool = true,
    turntable_views: usize = 8,
    image_size: usize = 64,
});

render_keys!(CompleteRun {
    seed: u64 = 0,
    resample: usize = 0,
    variance: Option<ReverseVariance> = None,
    clip_estimate: bool = true,
    clamp_output: bool = true,
});

render_keys!(GuideRun {
    seed: u64 = 0,
    lambda: f64 = 0.1,
    resolution: Option<usize> = None,
    variance: Option<ReverseVariance> = None,
    clip_estimate: bool = true,
    clamp_output: bool = true,
});

render_keys!(RenderRun {
    views: usize = 8,
    image_size: usize = 128,
    radius: f64 = 2.5,
});

render_keys!(MeshRun { iso: Option<f64> = None });

render_keys!(EvalRun {
    seed: u64 = 0,
    points: usize = 2048,
    iso: Option<f64> = None,
});

render_keys!(MpsnrRun {});

impl FitRun {
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            iterations: self.iterations,
            lr: self.lr,
            pixels_per_step: self.pixels_per_step,
            views_per_step: self.views_per_step,
            tv_weight: self.tv_weight,
            resolution: self.resolution,
            render: self.render(),
            activation: self.activation(),
        }
    }
}

impl TrainRun {
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            lambda_rgb: self.lambda_rgb,
            views_per_step: self.views_per_step,
            pixels_per_step: self.pixels_per_step,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_schedule: self.lr_schedule,
            iterations: self.iterations,
            seed: self.seed,
            ema_decay: self.ema_decay,
            render: self.render(),
            activation: self.activation(),
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            resnet_blocks_per_level: self.resnet_blocks_per_level,
            attention_levels: self.attention_levels.clone(),
            attention_head_channels: self.attention_head_channels,
            time_embed_dim: self.time_embed_dim,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            steps: self.steps,
            variance: self.variance,
        }
    }
}

macro_rules! sampler_config {
    ($($name:ident),*) => {$(
        impl $name {
            pub fn sampler(&self) -> SamplerConfig {
                SamplerConfig {
                    clip_estimate: self.clip_estimate,
                    clamp_output: self.clamp_output,
                }
            }
        }
    )*};
}

sampler_config!(SampleRun, CompleteRun, GuideRun);

#[cfg(test)]
mod tests {
    use super::*;

    fn sources(file: Option<&str>, sets: &[&str]) -> (tempfile::TempDir, Sources) {
        let dir = tempfile::tempdir().unwrap();
        let file = file.map(|text| {
            let p = dir.path().join("c.json");
            std::fs::write(&p, text).unwrap();
            p
        });
        let sets = sets.iter().map(|s| s.to_string()).collect();
        (
            dir,
            Sources {
                file,
                sets,
                flags: vec![],
            },
        )
    }

    #[test]
    fn flags_override_sets_override_file() {
        let (_d, mut src) = sources(
            Some(r#"{"iterations": 5, "lr": 0.5, "seed": 1}"#),
            &["lr=0.25", "seed=2"],
        );
        src.flag("seed", Some(3u64));
        let cfg: FitRun = src.resolve().unwrap();
        assert_eq!((cfg.iterations, cfg.lr, cfg.seed), (5, 0.25, 3));
        assert_eq!(cfg.n_steps, 92);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let (_d, src) = sources(Some(r#"{"iterationz": 5}"#), &[]);
        let err = src.resolve::<FitRun>().unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some(), "{err}");
        let (_d, src) = sources(None, &["no_equals_sign"]);
        assert!(src
            .resolve::<FitRun>()
            .unwrap_err()
            .downcast_ref::<UsageError>()
            .is_some());
    }

    #[test]
    fn bare_words_parse_as_enum_names() {
        let (_d, src) = sources(None, &["lr_schedule=cosine", "variance=posterior"]);
        let cfg: TrainRun = src.resolve().unwrap();
        assert_eq!(cfg.lr_schedule, LrSchedule::Cosine);
        assert_eq!(cfg.variance, ReverseVariance::Posterior);
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = SampleRun {
            count: 3,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let (_d, src) = sources(Some(&text), &[]);
        let back: SampleRun = src.resolve().unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
