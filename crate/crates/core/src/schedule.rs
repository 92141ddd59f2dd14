//! Diffusion noise schedule and the reverse-step constants derived from it.
//!
//! All tables are indexed by `t` in `1..=T`; index 0 of each vector is
//! unused padding so that `beta[t]` reads like the maths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which variance the unconditional reverse chain injects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `Σ_t = β_t² / (2 α_t (1 − ᾱ_t))`.
    #[default]
    Scaled,
    /// The DDPM posterior variance `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    Posterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub variance: ReverseVariance,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: 0.0015,
            beta_end: 0.05,
            steps: 1000,
            variance: ReverseVariance::Scaled,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let mut s = linear_schedule(self.beta_start, self.beta_end, self.steps)?;
        if self.variance == ReverseVariance::Posterior {
            s = s.with_variance(ReverseVariance::Posterior);
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub omega: Vec<f64>,
    pub variance: ReverseVariance,
}

/// β linearly spaced from `beta_1` to `beta_t` inclusive.
pub fn linear_schedule(beta_1: f64, beta_t: f64, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::Config(format!(
            "schedule needs 0 < beta_1 <= beta_T < 1, got {beta_1} and {beta_t}"
        )));
    }
    let mut beta = vec![0.0; steps + 1];
    for (t, b) in beta.iter_mut().enumerate().skip(1) {
        *b = if steps == 1 {
            beta_1
        } else {
            beta_1 + (beta_t - beta_1) * (t - 1) as f64 / (steps - 1) as f64
        };
    }
    Ok(NoiseSchedule::from_betas(beta))
}

impl NoiseSchedule {
    fn from_betas(beta: Vec<f64>) -> Self {
        let steps = beta.len() - 1;
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        let mut a = vec![1.0; steps + 1];
        let mut b = vec![0.0; steps + 1];
        let mut sigma2 = vec![0.0; steps + 1];
        let mut omega = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            a[t] = 1.0 / alpha[t].sqrt();
            b[t] = beta[t] / (1.0 - alpha_bar[t]).sqrt();
            sigma2[t] = beta[t] * beta[t] / (2.0 * alpha[t] * (1.0 - alpha_bar[t]));
            omega[t] = alpha_bar[t] * alpha_bar[t];
        }
        Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            a,
            b,
            sigma2,
            omega,
            variance: ReverseVariance::Scaled,
        }
    }

    /// Replaces the reverse-chain variance table.
    pub fn with_variance(mut self, variance: ReverseVariance) -> Self {
        for t in 1..=self.steps {
            self.sigma2[t] = match variance {
                ReverseVariance::Scaled => {
                    self.beta[t] * self.beta[t] / (2.0 * self.alpha[t] * (1.0 - self.alpha_bar[t]))
                }
                ReverseVariance::Posterior => (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t],
            };
        }
        self.variance = variance;
        self
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Config(format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// `(a_t, b_t, Σ_t)`.
    pub fn reverse_constants(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        Ok((self.a[t], self.b[t], self.sigma2[t]))
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            beta_start: self.beta[1],
            beta_end: self.beta[self.steps],
            steps: self.steps,
            variance: self.variance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        linear_schedule(0.0015, 0.05, 1000).unwrap()
    }

    #[test]
    fn endpoints_and_products() {
        let s = default_schedule();
        assert_eq!(s.beta[1], 0.0015);
        assert!((s.beta[1000] - 0.05).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.9985).abs() < 1e-15);
        // independent running product in double precision
        assert!((s.alpha_bar[1000] / 4.221_542_238_983_646e-12 - 1.0).abs() < 1e-10);
        let log_sum: f64 = (1..=1000).map(|t| s.alpha[t].ln()).sum();
        assert!((s.alpha_bar[1000] - log_sum.exp()).abs() / s.alpha_bar[1000] < 1e-12);
        assert!(s.omega[1000] / s.omega[1] < 1e-20);
    }

    #[test]
    fn reverse_constants_at_first_step() {
        let (a, b, sig) = default_schedule().reverse_constants(1).unwrap();
        assert!((b - 0.0015f64.sqrt()).abs() < 1e-12);
        assert!((a - 1.000_750_8).abs() < 1e-7);
        assert!((sig - 7.5113e-4).abs() < 1e-8);
        assert!(default_schedule().reverse_constants(0).is_err());
        assert!(default_schedule().reverse_constants(1001).is_err());
    }

    #[test]
    fn monotone_and_bounded() {
        let s = default_schedule();
        for t in 1..=1000 {
            assert!(s.b[t] > 0.0 && s.a[t] >= 1.0 && s.sigma2[t] > 0.0);
            if t > 1 {
                assert!(s.beta[t] >= s.beta[t - 1]);
                assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
                assert!(s.omega[t] < s.omega[t - 1]);
            }
        }
    }

    #[test]
    fn posterior_variance_starts_at_zero() {
        let s = default_schedule().with_variance(ReverseVariance::Posterior);
        assert_eq!(s.sigma2[1], 0.0);
        assert!(s.sigma2[500] < s.beta[500]);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(linear_schedule(0.0, 0.05, 10).is_err());
        assert!(linear_schedule(0.1, 0.05, 10).is_err());
        assert!(linear_schedule(0.1, 1.0, 10).is_err());
        assert!(linear_schedule(0.1, 0.2, 0).is_err());
        let one = linear_schedule(0.1, 0.2, 1).unwrap();
        assert_eq!(one.beta[1], 0.1);
    }
}
