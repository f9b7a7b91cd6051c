use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

/// Variance-preserving forward process with scaled-linear betas.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.timesteps;
        if t == 0 {
            return Err(Error::invalid("schedule.timesteps", "must be >= 1"));
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::invalid(
                "schedule.beta",
                format!("need 0 < start <= end < 1, got {} / {}", cfg.beta_start, cfg.beta_end),
            ));
        }
        let (a, b) = (cfg.beta_start.sqrt(), cfg.beta_end.sqrt());
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                let f = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
                (a + f * (b - a)).powi(2)
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|beta| {
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `sqrt(alpha_bar_t)`.
    pub fn signal_coef(&self, t: usize) -> f64 {
        self.alpha_bars[t].sqrt()
    }

    /// `sqrt(1 - alpha_bar_t)`.
    pub fn noise_coef(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    /// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`, one timestep per batch row.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        let b = x0.dims()[0];
        if t.len() != b {
            return Err(Error::shape("timesteps per batch", b, t.len()));
        }
        if let Some(&bad) = t.iter().find(|&&s| s >= self.len()) {
            return Err(Error::invalid("timestep", format!("{bad} >= {}", self.len())));
        }
        let mut shape = vec![b];
        shape.extend(std::iter::repeat(1).take(x0.rank() - 1));
        let coef = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?)
        };
        let s = coef(t.iter().map(|&i| self.signal_coef(i)).collect())?;
        let n = coef(t.iter().map(|&i| self.noise_coef(i)).collect())?;
        Ok((x0.broadcast_mul(&s)? + eps.broadcast_mul(&n)?)?)
    }

    /// Evenly spaced ("leading") sampling timesteps, highest first.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(Error::invalid("steps", "must be >= 1"));
        }
        if steps > self.len() {
            return Err(Error::invalid(
                "steps",
                format!("{steps} exceeds the {} training timesteps", self.len()),
            ));
        }
        let stride = self.len() / steps;
        Ok((0..steps).map(|i| i * stride).rev().collect())
    }
}
