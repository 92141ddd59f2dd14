//! Denoiser checkpoints as the sampling commands see them: a network, the
//! schedule it was trained with and, when known, the field resolution.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use raddiff_core::io::{read_archive, write_archive};
use raddiff_core::{DenoiserNet, NoiseSchedule, ScheduleConfig};
use raddiff_tensor::Tensor;
use serde_json::{json, Value};

pub struct Model {
    pub net: DenoiserNet,
    pub schedule: ScheduleConfig,
    pub resolution: Option<usize>,
}

/// Writes network weights with the schedule and resolution in the header.
pub fn save_model(path: &Path, net: &DenoiserNet, schedule: &NoiseSchedule, resolution: usize) -> Result<()> {
    let header = json!({
        "kind": "denoiser",
        "config": net.config,
        "schedule": schedule.config(),
        "resolution": resolution,
    });
    let tensors: Vec<(&str, &Tensor)> = net.params.iter().map(|(k, v)| (k.as_str(), v)).collect();
    Ok(write_archive(path, &header, &tensors)?)
}

fn checkpoint_in(dir: &Path) -> Result<PathBuf> {
    ["model.ckpt", "trainer.ckpt"]
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
        .with_context(|| format!("{} holds neither model.ckpt nor trainer.ckpt", dir.display()))
}

/// Loads a model or trainer checkpoint, or the one inside a training
/// output directory. A missing resolution is looked up in the sibling
/// `config.json` written by `train`.
pub fn load_model(path: &Path) -> Result<Model> {
    let path = if path.is_dir() {
        checkpoint_in(path)?
    } else {
        path.to_path_buf()
    };
    let (header, _) = read_archive(&path)?;
    let schedule = match header.get("schedule") {
        Some(v) => serde_json::from_value(v.clone()).with_context(|| format!("bad schedule in {}", path.display()))?,
        None => {
            log::warn!("{} records no schedule; using the default", path.display());
            ScheduleConfig::default()
        }
    };
    let from_dir = || -> Option<usize> {
        let text = std::fs::read_to_string(path.parent()?.join("config.json")).ok()?;
        let v: Value = serde_json::from_str(&text).ok()?;
        Some(v.get("resolution")?.as_u64()? as usize)
    };
    let resolution = header
        .get("resolution")
        .and_then(Value::as_u64)
        .map(|r| r as usize)
        .or_else(from_dir);
    let net = DenoiserNet::load(&path)?;
    log::info!("loaded {} ({} parameters)", path.display(), net.parameter_count());
    Ok(Model {
        net,
        schedule,
        resolution,
    })
}
