//! Time-conditioned 3D U-Net noise predictor.
//!
//! Layout per level `l` (channels `base·mult[l]`, resolution `N / 2^l`):
//! `resnet_blocks` residual blocks, optional self-attention after the last
//! block, then 2³ average pooling. The decoder mirrors this with nearest
//! upsampling and one skip connection per level (concatenated before the
//! level's blocks). Parameters are keyed by layer path, e.g.
//! `down.1.res.0.conv1.w`.

use std::collections::BTreeMap;
use std::path::Path;

use raddiff_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::CHANNELS;
use crate::io::{read_archive, write_archive};
use crate::render::field_resolution;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resnet_blocks_per_level: usize,
    /// Downsampling factors (1, 2, 4, …) of the levels that get attention.
    pub attention_levels: Vec<usize>,
    pub attention_head_channels: usize,
    /// Defaults to `4 · base_channels`.
    pub time_embed_dim: Option<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            resnet_blocks_per_level: 2,
            attention_levels: vec![4],
            attention_head_channels: 8,
            time_embed_dim: None,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0
            || self.channel_multipliers.is_empty()
            || self.channel_multipliers.contains(&0)
            || self.resnet_blocks_per_level == 0
            || self.attention_head_channels == 0
            || self.time_embed_dim == Some(0)
        {
            return Err(Error::Config(format!("denoiser sizes must be positive: {self:?}")));
        }
        if let Some(f) = self.attention_levels.iter().find(|f| !f.is_power_of_two()) {
            return Err(Error::Config(format!(
                "attention level {f} is not a power-of-two factor"
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn temb_dim(&self) -> usize {
        self.time_embed_dim.unwrap_or(4 * self.base_channels)
    }

    fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&(1 << level))
    }

    /// Checks that an `N³` grid survives `levels − 1` halvings.
    pub fn check_resolution(&self, n: usize) -> Result<()> {
        let div = 1 << (self.levels() - 1);
        if n == 0 || n % div != 0 {
            return Err(Error::Dimension(format!(
                "resolution {n} is not divisible by {div} for a {}-level network",
                self.levels()
            )));
        }
        Ok(())
    }

    /// Every parameter tensor's name and shape, in construction order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let e = self.temb_dim();
        let b = self.base_channels;
        linear_specs(&mut specs, "time.lin1", b, e);
        linear_specs(&mut specs, "time.lin2", e, e);
        conv_specs(&mut specs, "in", CHANNELS, self.channels(0), 3);
        let mut c = self.channels(0);
        for l in 0..self.levels() {
            let co = self.channels(l);
            for r in 0..self.resnet_blocks_per_level {
                res_specs(&mut specs, &format!("down.{l}.res.{r}"), c, co, e);
                c = co;
            }
            if self.has_attention(l) {
                attn_specs(&mut specs, &format!("down.{l}.attn"), c);
            }
        }
        res_specs(&mut specs, "mid.res.0", c, c, e);
        for l in (0..self.levels()).rev() {
            let co = self.channels(l);
            for r in 0..self.resnet_blocks_per_level {
                let ci = if r == 0 { c + co } else { c };
                res_specs(&mut specs, &format!("up.{l}.res.{r}"), ci, co, e);
                c = co;
            }
            if self.has_attention(l) {
                attn_specs(&mut specs, &format!("up.{l}.attn"), c);
            }
        }
        norm_specs(&mut specs, "out.norm", c);
        conv_specs(&mut specs, "out.conv", c, CHANNELS, 3);
        specs
    }
}

fn linear_specs(specs: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize) {
    specs.push((format!("{name}.w"), vec![cout, cin]));
    specs.push((format!("{name}.b"), vec![cout]));
}

fn conv_specs(specs: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize, k: usize) {
    specs.push((format!("{name}.w"), vec![cout, cin, k, k, k]));
    specs.push((format!("{name}.b"), vec![cout]));
}

fn norm_specs(specs: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize) {
    specs.push((format!("{name}.g"), vec![c]));
    specs.push((format!("{name}.b"), vec![c]));
}

fn res_specs(specs: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize, e: usize) {
    norm_specs(specs, &format!("{name}.norm1"), cin);
    conv_specs(specs, &format!("{name}.conv1"), cin, cout, 3);
    linear_specs(specs, &format!("{name}.temb"), e, cout);
    norm_specs(specs, &format!("{name}.norm2"), cout);
    conv_specs(specs, &format!("{name}.conv2"), cout, cout, 3);
    if cin != cout {
        conv_specs(specs, &format!("{name}.skip"), cin, cout, 1);
    }
}

fn attn_specs(specs: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize) {
    norm_specs(specs, &format!("{name}.norm"), c);
    for p in ["q", "k", "v", "proj"] {
        linear_specs(specs, &format!("{name}.{p}"), c, c);
    }
}

pub fn parameter_count(cfg: &DenoiserConfig) -> usize {
    cfg.parameter_specs()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Group count for normalizing `c` channels: the largest divisor of `c`
/// not exceeding 8.
pub fn norm_groups(c: usize) -> usize {
    (1..=c.min(8)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Sinusoidal embedding of a diffusion step: `dim/2` sines then cosines
/// at geometrically spaced frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(&[dim], out).expect("embedding length")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl DenoiserNet {
    /// Fan-in normal initialization; norms start as identity, biases and the
    /// output convolution at zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_specs() {
            let len: usize = shape.iter().product();
            let t = if name.starts_with("out.conv") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".g") {
                Tensor::ones(&shape)
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = len / shape[0];
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` as a tracked leaf.
    pub fn track(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect()
    }

    /// Registers every parameter on `tape` as an untracked constant.
    pub fn freeze(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }

    /// Predicted noise for `f_t` (`[4, N, N, N]`) at step `t ≥ 1`.
    pub fn forward(&self, f_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.freeze(&mut tape);
        let x = tape.constant(f_t.clone());
        let y = self.forward_on(&mut tape, &p, x, t)?;
        Ok(tape.value(y).clone())
    }

    /// Records the forward pass on `tape` using parameter handles `p`.
    pub fn forward_on(&self, tape: &mut Tape, p: &BTreeMap<String, Var>, x: Var, t: usize) -> Result<Var> {
        let n = field_resolution(tape.value(x))?;
        self.config.check_resolution(n)?;
        if t == 0 {
            return Err(Error::Config("diffusion step must be at least 1".into()));
        }
        let mut net = Builder {
            tape,
            p,
            cfg: &self.config,
        };
        let temb = net.time_embedding(t)?;
        let mut h = net.conv("in", x)?;
        let mut skips = Vec::with_capacity(self.config.levels());
        for l in 0..self.config.levels() {
            for r in 0..self.config.resnet_blocks_per_level {
                h = net.resblock(&format!("down.{l}.res.{r}"), h, temb)?;
            }
            if self.config.has_attention(l) {
                h = net.attention(&format!("down.{l}.attn"), h)?;
            }
            skips.push(h);
            if l + 1 < self.config.levels() {
                h = net.tape.avg_pool2(h)?;
            }
        }
        h = net.resblock("mid.res.0", h, temb)?;
        for l in (0..self.config.levels()).rev() {
            if l + 1 < self.config.levels() {
                h = net.tape.upsample2(h)?;
            }
            h = net.tape.concat(h, skips[l])?;
            for r in 0..self.config.resnet_blocks_per_level {
                h = net.resblock(&format!("up.{l}.res.{r}"), h, temb)?;
            }
            if self.config.has_attention(l) {
                h = net.attention(&format!("up.{l}.attn"), h)?;
            }
        }
        h = net.norm("out.norm", h)?;
        h = net.tape.silu(h)?;
        net.conv("out.conv", h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "kind": "denoiser", "config": self.config });
        let tensors: Vec<(&str, &Tensor)> = self.params.iter().map(|(k, v)| (k.as_str(), v)).collect();
        write_archive(path, &header, &tensors)
    }

    /// Loads a network from a denoiser or trainer checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = read_archive(path)?;
        let config: DenoiserConfig =
            serde_json::from_value(header["config"].clone()).map_err(|e| Error::FieldFormat {
                path: path.to_path_buf(),
                reason: format!("bad denoiser config: {e}"),
            })?;
        let params: BTreeMap<String, Tensor> = tensors
            .into_iter()
            .filter_map(|(k, v)| match k.strip_prefix("param/") {
                Some(name) => Some((name.to_string(), v)),
                None if !k.contains('/') => Some((k, v)),
                None => None,
            })
            .collect();
        Self::from_params(config, params).map_err(|e| Error::FieldFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Assembles a network, checking names and shapes against the config.
    pub fn from_params(config: DenoiserConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.parameter_specs();
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape) in &specs {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }
}

struct Builder<'a> {
    tape: &'a mut Tape,
    p: &'a BTreeMap<String, Var>,
    cfg: &'a DenoiserConfig,
}

impl Builder<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.p
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.get(&format!("{name}.w"))?, self.get(&format!("{name}.b"))?);
        Ok(self.tape.conv3d(x, w, Some(b))?)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let (g, b) = (self.get(&format!("{name}.g"))?, self.get(&format!("{name}.b"))?);
        let c = self.tape.shape(x)[0];
        Ok(self.tape.group_norm(x, g, b, norm_groups(c))?)
    }

    /// `w · x + b` for `x` of shape `[in, cols]`.
    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.get(&format!("{name}.w"))?, self.get(&format!("{name}.b"))?);
        let y = self.tape.matmul(w, x)?;
        Ok(self.tape.add_channel_bias(y, b)?)
    }

    fn time_embedding(&mut self, t: usize) -> Result<Var> {
        let b = self.cfg.base_channels;
        let e = self.tape.constant(timestep_embedding(t, b).reshape(&[b, 1])?);
        let h = self.linear("time.lin1", e)?;
        let h = self.tape.silu(h)?;
        let h = self.linear("time.lin2", h)?;
        Ok(self.tape.silu(h)?)
    }

    fn resblock(&mut self, name: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm(&format!("{name}.norm1"), x)?;
        let h = self.tape.silu(h)?;
        let h = self.conv(&format!("{name}.conv1"), h)?;
        let tb = self.linear(&format!("{name}.temb"), temb)?;
        let h = self.tape.add_channel_bias(h, tb)?;
        let h = self.norm(&format!("{name}.norm2"), h)?;
        let h = self.tape.silu(h)?;
        let h = self.conv(&format!("{name}.conv2"), h)?;
        let skip = if self.p.contains_key(&format!("{name}.skip.w")) {
            self.conv(&format!("{name}.skip"), x)?
        } else {
            x
        };
        Ok(self.tape.add(skip, h)?)
    }

    /// Multi-head self-attention over all voxels, with a residual connection.
    fn attention(&mut self, name: &str, x: Var) -> Result<Var> {
        let shape = self.tape.shape(x).to_vec();
        let c = shape[0];
        let v: usize = shape[1..].iter().product();
        let heads = (c / self.cfg.attention_head_channels).max(1);
        if c % heads != 0 {
            return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
        }
        let d = c / heads;
        let h = self.norm(&format!("{name}.norm"), x)?;
        let h = self.tape.reshape(h, &[c, v])?;
        let mut qkv = [h; 3];
        for (slot, p) in qkv.iter_mut().zip(["q", "k", "v"]) {
            let y = self.linear(&format!("{name}.{p}"), h)?;
            *slot = self.tape.reshape(y, &[heads, d, v])?;
        }
        let [q, k, val] = qkv;
        let scores = self.tape.matmul_t(q, k, true, false)?;
        let scores = self.tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = self.tape.softmax(scores)?;
        let out = self.tape.matmul_t(val, attn, false, true)?;
        let out = self.tape.reshape(out, &[c, v])?;
        let out = self.linear(&format!("{name}.proj"), out)?;
        let out = self.tape.reshape(out, &shape)?;
        Ok(self.tape.add(x, out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            resnet_blocks_per_level: 1,
            attention_levels: vec![2],
            attention_head_channels: 4,
            time_embed_dim: Some(8),
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let net = DenoiserNet::new(tiny(), 0).unwrap();
        let x = Tensor::from_fn(&[4, 4, 4, 4], |i| (i as f64 * 0.37).sin());
        assert_eq!(net.forward(&x, 5).unwrap().shape(), &[4, 4, 4, 4]);
        assert!(net.forward(&Tensor::zeros(&[4, 5, 5, 5]), 5).is_err());
        assert!(net.forward(&x, 0).is_err());
    }

    #[test]
    fn count_matches_tensors() {
        let net = DenoiserNet::new(tiny(), 0).unwrap();
        assert_eq!(net.parameter_count(), parameter_count(&tiny()));
    }

    #[test]
    fn groups_divide_channels() {
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(24), 8);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(7), 7);
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let a = timestep_embedding(1, 16);
        let b = timestep_embedding(1000, 16);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert!(a.max_abs_diff(&b).unwrap() > 0.1);
    }
}
