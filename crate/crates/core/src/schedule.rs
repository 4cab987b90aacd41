//! Discrete DDPM noise schedule and the forward (noising) process.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, with `t = 1` the least noisy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss weighting `gamma(lambda_t)` as a function of the signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnrWeighting {
    Constant { value: f64 },
    /// `min(lambda, cap) / lambda`, the truncated-SNR weighting.
    MinSnr { cap: f64 },
}

impl Default for SnrWeighting {
    fn default() -> Self {
        SnrWeighting::Constant { value: 1.0 }
    }
}

impl SnrWeighting {
    pub fn weight(&self, snr: f64) -> f64 {
        match *self {
            SnrWeighting::Constant { value } => value,
            SnrWeighting::MinSnr { cap } => snr.min(cap) / snr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    snr: Vec<f64>,
    weighting: SnrWeighting,
}

/// Linear beta schedule rescaled so its endpoints match the 1000-step DDPM
/// schedule (`1e-4 .. 0.02`) for any `T`.
pub fn linear_schedule(t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {t_max}")));
    }
    let scale = 1000.0 / t_max as f64;
    let start = (scale * 1e-4).min(0.5);
    let end = (scale * 0.02).min(0.999);
    let betas = (0..t_max).map(|i| start + (end - start) * i as f64 / (t_max - 1) as f64).collect();
    NoiseSchedule::from_betas(betas, SnrWeighting::default())
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>, weighting: SnrWeighting) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidArgument("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let snr = alpha_bars.iter().map(|ab| ab / (1.0 - ab)).collect();
        let sched = Self { t_max: betas.len(), betas, alphas, alpha_bars, snr, weighting };
        sched.with_weighting(weighting)
    }

    pub fn with_weighting(mut self, weighting: SnrWeighting) -> Result<Self> {
        if let Some(bad) = self.snr.iter().map(|&l| weighting.weight(l)).find(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidArgument(format!("weighting produced non-positive gamma {bad}")));
        }
        self.weighting = weighting;
        Ok(self)
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn weighting(&self) -> SnrWeighting {
        self.weighting
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_max {
            return Err(Error::TimestepOutOfRange { t, max: self.t_max });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    /// `lambda_t = alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        Ok(self.snr[self.index(t)?])
    }

    /// `gamma(lambda_t)`.
    pub fn gamma(&self, t: usize) -> Result<f64> {
        Ok(self.weighting.weight(self.snr(t)?))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snr
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn forward_noise<S: Scalar>(&self, x0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        x0.ensure_same_shape(eps, "forward_noise")?;
        let ab = self.alpha_bar(t)?;
        let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
        Ok(x0.zip_map(eps, |x, e| a * x + b * e))
    }

    /// Recovers `x0` from `x_t` and the noise that produced it.
    pub fn predict_x0<S: Scalar>(&self, x_t: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        x_t.ensure_same_shape(eps, "predict_x0")?;
        let ab = self.alpha_bar(t)?;
        let (inv, b) = (S::lit(1.0 / ab.sqrt()), S::lit((1.0 - ab).sqrt()));
        Ok(x_t.zip_map(eps, |x, e| (x - b * e) * inv))
    }

    /// Evenly spaced subset of `1..=T` with `steps` entries, ascending and
    /// always containing `T`.
    pub fn spaced_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_max {
            return Err(Error::InvalidArgument(format!("steps {steps} outside 1..={}", self.t_max)));
        }
        if steps == 1 {
            return Ok(vec![self.t_max]);
        }
        let span = (self.t_max - 1) as f64;
        let mut ts: Vec<usize> = (0..steps).map(|i| 1 + (i as f64 * span / (steps - 1) as f64).round() as usize).collect();
        ts.dedup();
        Ok(ts)
    }
}
