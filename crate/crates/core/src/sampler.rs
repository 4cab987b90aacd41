//! Spaced DDPM ancestral sampling with classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditioningBundle, DenoiserParams};
use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, cfg_scale: 5.5, seed: 0 }
    }
}

/// Prompt-side inputs of a sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PromptConditioning {
    pub prompt_id: Option<u32>,
    /// Replaces the null prompt in the guidance branch, and is passed as the
    /// negative-prompt input of the conditional branch.
    pub negative_prompt_id: Option<u32>,
    pub adapter_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleStats {
    pub conditional_evals: usize,
    pub guidance_evals: usize,
}

/// `uncond + scale * (cond - uncond)`.
pub fn cfg_combine<S: Scalar>(eps_cond: &Tensor<S>, eps_uncond: &Tensor<S>, scale: S) -> Result<Tensor<S>> {
    eps_cond.ensure_same_shape(eps_uncond, "cfg_combine")?;
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u)))
}

/// Samples an SR image for `lq` at the denoiser's working resolution.
pub fn ddpm_sample<S: Scalar>(
    params: &DenoiserParams<S>,
    schedule: &NoiseSchedule,
    lq: &RasterImage<S>,
    sampler: &SamplerConfig,
    prompts: &PromptConditioning,
) -> Result<(RasterImage<S>, SampleStats)> {
    if !params.is_finite() {
        return Err(Error::NonFiniteParams("sampling refused".into()));
    }
    if schedule.t_max() != params.config.t_max {
        return Err(Error::InvalidArgument(format!("schedule T={} but model trained for T={}", schedule.t_max(), params.config.t_max)));
    }
    if !(sampler.cfg_scale >= 0.0 && sampler.cfg_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("cfg scale {} must be >= 0", sampler.cfg_scale)));
    }
    let res = params.config.resolution;
    if lq.width() != lq.height() || res % lq.width() != 0 {
        return Err(Error::ShapeMismatch(format!("lq {:?} does not tile working resolution {res}", lq.dims())));
    }
    let timesteps = schedule.spaced_timesteps(sampler.steps)?;
    let adapter = prompts.adapter_scale.unwrap_or(1.0);
    let base = ConditioningBundle::from_lq(lq, res / lq.width())?.with_adapter_scale(adapter);
    let cond = base.clone().with_prompt(prompts.prompt_id).with_negative(prompts.negative_prompt_id);
    let guide = base.with_prompt(prompts.negative_prompt_id);
    let scale = S::lit(sampler.cfg_scale);

    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut x = Tensor::<S>::randn(3, res, res, &mut rng);
    let mut stats = SampleStats::default();
    for (i, &t) in timesteps.iter().enumerate().rev() {
        let eps_c = params.predict_noise(&x, t, &cond)?;
        let eps_u = params.predict_noise(&x, t, &guide)?;
        stats.conditional_evals += 1;
        stats.guidance_evals += 1;
        let eps = cfg_combine(&eps_c, &eps_u, scale)?;

        let ab_t = schedule.alpha_bar(t)?;
        let ab_prev = if i == 0 { 1.0 } else { schedule.alpha_bar(timesteps[i - 1])? };
        let beta = 1.0 - ab_t / ab_prev;
        let x0 = schedule.predict_x0(&x, t, &eps)?.map(|v| v.max(-S::one()).min(S::one()));
        let c0 = S::lit(ab_prev.sqrt() * beta / (1.0 - ab_t));
        let ct = S::lit((1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t));
        let mut next = x0.zip_map(&x, |a, b| c0 * a + ct * b);
        if i > 0 {
            let sigma = S::lit((beta * (1.0 - ab_prev) / (1.0 - ab_t)).max(0.0).sqrt());
            let z = Tensor::<S>::randn(3, res, res, &mut rng);
            next = next.zip_map(&z, |m, n| m + sigma * n);
        }
        x = next;
    }
    Ok((RasterImage::from_model_tensor(&x)?, stats))
}
