//! Preference losses on noise-prediction errors.
//!
//! For instance `m` with mask `s_m`, the masked denoising error of a
//! prediction is `gamma * || s_m * (eps - eps_hat) ||^2`. The per-instance
//! preference argument is
//!
//! ```text
//! z_m = -beta * T * ((E_theta(x_w) - E_ref(x_w)) - (E_theta(x_l) - E_ref(x_l)))
//! ```
//!
//! and the instance loss is `sum_m w_m * -ln sigmoid(z_m)`. With a single
//! full-image mask this is the Diffusion-DPO objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::InstanceWeightVector;
use crate::scalar::{neg_log_sigmoid, sigmoid, Scalar};
use crate::tensor::Tensor;

/// How masked squared errors are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorReduction {
    /// Sum over masked elements (larger instances give larger errors).
    #[default]
    Sum,
    /// Sum divided by the number of masked elements.
    PerElementMean,
}

/// True noise plus policy/reference predictions for a winner/loser pair at
/// one timestep. The same `eps_true` noised both images.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictionBatch<S> {
    pub eps_true: Tensor<S>,
    pub eps_theta_w: Tensor<S>,
    pub eps_ref_w: Tensor<S>,
    pub eps_theta_l: Tensor<S>,
    pub eps_ref_l: Tensor<S>,
    /// `H x W` masks, broadcast across channels.
    pub masks: Vec<Vec<bool>>,
    pub weights: InstanceWeightVector<S>,
    pub t: usize,
    /// `gamma(lambda_t)`.
    pub gamma: S,
    pub beta: S,
    pub t_max: usize,
    pub reduction: ErrorReduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue<S> {
    pub total: S,
    pub per_instance: Vec<S>,
    /// `z_m` per instance.
    pub inner_argument: Vec<S>,
}

/// Gradients of the total loss w.r.t. every tensor input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients<S> {
    pub eps_true: Tensor<S>,
    pub eps_theta_w: Tensor<S>,
    pub eps_ref_w: Tensor<S>,
    pub eps_theta_l: Tensor<S>,
    pub eps_ref_l: Tensor<S>,
}

/// Scalar DPO: `-ln sigmoid(beta * ((lp_theta_w - lp_ref_w) - (lp_theta_l - lp_ref_l)))`.
pub fn dpo_preference_loss<S: Scalar>(lp_theta_w: S, lp_ref_w: S, lp_theta_l: S, lp_ref_l: S, beta: S) -> S {
    neg_log_sigmoid(beta * ((lp_theta_w - lp_ref_w) - (lp_theta_l - lp_ref_l)))
}

/// `gamma * sum over masked elements of (eps_true - eps_hat)^2`.
pub fn masked_denoise_error<S: Scalar>(eps_true: &Tensor<S>, eps_hat: &Tensor<S>, mask: &[bool], gamma: S) -> Result<S> {
    masked_error(eps_true, eps_hat, mask, gamma, ErrorReduction::Sum)
}

pub fn masked_error<S: Scalar>(eps_true: &Tensor<S>, eps_hat: &Tensor<S>, mask: &[bool], gamma: S, reduction: ErrorReduction) -> Result<S> {
    eps_true.ensure_same_shape(eps_hat, "masked error")?;
    if mask.len() != eps_true.plane_len() {
        return Err(Error::ShapeMismatch(format!("mask of {} for plane of {}", mask.len(), eps_true.plane_len())));
    }
    let n = eps_true.plane_len();
    let mut acc = S::zero();
    for (plane_t, plane_h) in eps_true.data().chunks_exact(n).zip(eps_hat.data().chunks_exact(n)) {
        for ((&a, &b), &m) in plane_t.iter().zip(plane_h).zip(mask) {
            if m {
                let d = a - b;
                acc += d * d;
            }
        }
    }
    Ok(gamma * acc * reduction_scale(mask, eps_true.channels(), reduction))
}

fn reduction_scale<S: Scalar>(mask: &[bool], channels: usize, reduction: ErrorReduction) -> S {
    match reduction {
        ErrorReduction::Sum => S::one(),
        ErrorReduction::PerElementMean => {
            let count = mask.iter().filter(|m| **m).count() * channels;
            if count == 0 {
                S::zero()
            } else {
                S::one() / S::from_usize(count).unwrap()
            }
        }
    }
}

impl<S: Scalar> NoisePredictionBatch<S> {
    fn validate_shapes(&self) -> Result<()> {
        for (name, t) in [("eps_theta_w", &self.eps_theta_w), ("eps_ref_w", &self.eps_ref_w), ("eps_theta_l", &self.eps_theta_l), ("eps_ref_l", &self.eps_ref_l)] {
            self.eps_true.ensure_same_shape(t, name)?;
        }
        if self.masks.is_empty() || self.masks.len() != self.weights.weights.len() {
            return Err(Error::InvalidArgument(format!("{} masks with {} weights", self.masks.len(), self.weights.weights.len())));
        }
        if let Some(bad) = self.masks.iter().position(|m| m.len() != self.eps_true.plane_len()) {
            return Err(Error::ShapeMismatch(format!("mask {bad} does not match the {}x{} plane", self.eps_true.height(), self.eps_true.width())));
        }
        if !(self.beta > S::zero()) || !(self.gamma > S::zero()) || self.t_max == 0 {
            return Err(Error::InvalidArgument("beta, gamma and T must be positive".into()));
        }
        if self.weights.weights.iter().any(|w| !(*w >= S::zero() && *w <= S::one())) {
            return Err(Error::InvalidArgument("weights must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn validate_partition(&self) -> Result<()> {
        let n = self.eps_true.plane_len();
        for i in 0..n {
            let covered = self.masks.iter().filter(|m| m[i]).count();
            if covered != 1 {
                return Err(Error::NotAPartition(format!("pixel {i} covered {covered} times")));
            }
        }
        let tol = (S::epsilon().as_f64() * 100.0).max(1e-9);
        if !self.weights.is_on_simplex(tol) {
            return Err(Error::InvalidArgument(format!("weights sum to {} (not on the simplex)", self.weights.sum())));
        }
        Ok(())
    }

    /// Swaps the winner and loser branches.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        std::mem::swap(&mut s.eps_theta_w, &mut s.eps_theta_l);
        std::mem::swap(&mut s.eps_ref_w, &mut s.eps_ref_l);
        s
    }
}

/// Evaluates `sum_m w_m * -ln sigmoid(z_m)` over the batch's masks without
/// requiring them to form a partition (one training record carries a
/// single instance mask and its weight).
pub fn weighted_instance_loss<S: Scalar>(batch: &NoisePredictionBatch<S>) -> Result<LossValue<S>> {
    batch.validate_shapes()?;
    Ok(evaluate(batch, false)?.0)
}

/// Like [`weighted_instance_loss`], also returning input gradients.
pub fn weighted_instance_loss_with_grad<S: Scalar>(batch: &NoisePredictionBatch<S>) -> Result<(LossValue<S>, LossGradients<S>)> {
    batch.validate_shapes()?;
    let (v, g) = evaluate(batch, true)?;
    Ok((v, g.expect("gradients requested")))
}

/// Instance-level preference loss over a full partition with simplex weights.
pub fn dspo_instance_loss<S: Scalar>(batch: &NoisePredictionBatch<S>) -> Result<LossValue<S>> {
    batch.validate_shapes()?;
    batch.validate_partition()?;
    Ok(evaluate(batch, false)?.0)
}

pub fn dspo_instance_loss_with_grad<S: Scalar>(batch: &NoisePredictionBatch<S>) -> Result<(LossValue<S>, LossGradients<S>)> {
    batch.validate_shapes()?;
    batch.validate_partition()?;
    let (v, g) = evaluate(batch, true)?;
    Ok((v, g.expect("gradients requested")))
}

/// Whole-image preference loss: a single all-ones mask with weight 1.
pub fn diffusion_dpo_loss<S: Scalar>(batch: &NoisePredictionBatch<S>) -> Result<LossValue<S>> {
    check_single_full_mask(batch)?;
    dspo_instance_loss(batch)
}

pub fn diffusion_dpo_loss_with_grad<S: Scalar>(batch: &NoisePredictionBatch<S>) -> Result<(LossValue<S>, LossGradients<S>)> {
    check_single_full_mask(batch)?;
    dspo_instance_loss_with_grad(batch)
}

fn check_single_full_mask<S: Scalar>(batch: &NoisePredictionBatch<S>) -> Result<()> {
    if batch.masks.len() != 1 {
        return Err(Error::InvalidArgument(format!("whole-image loss takes one mask, got {}; use the instance loss", batch.masks.len())));
    }
    if !batch.masks[0].iter().all(|m| *m) {
        return Err(Error::InvalidArgument("whole-image loss requires an all-ones mask".into()));
    }
    Ok(())
}

/// Negative-prompt bookkeeping for the total objective: what the record
/// carries versus what the predictions were conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NegativePromptUse<'a> {
    pub record: Option<&'a str>,
    pub conditioned_on: Option<&'a str>,
}

/// The full objective. The formula is that of [`weighted_instance_loss`];
/// the negative prompt acts upstream through the predictions, so this only
/// enforces that predictions were produced under the record's prompt.
pub fn dspo_total_loss<S: Scalar>(batch: &NoisePredictionBatch<S>, negative: NegativePromptUse<'_>) -> Result<LossValue<S>> {
    check_negative(negative)?;
    weighted_instance_loss(batch)
}

pub fn dspo_total_loss_with_grad<S: Scalar>(batch: &NoisePredictionBatch<S>, negative: NegativePromptUse<'_>) -> Result<(LossValue<S>, LossGradients<S>)> {
    check_negative(negative)?;
    weighted_instance_loss_with_grad(batch)
}

fn check_negative(negative: NegativePromptUse<'_>) -> Result<()> {
    match (negative.record, negative.conditioned_on) {
        (Some(p), None) => Err(Error::MissingNegativePrompt(p.to_string())),
        (Some(p), Some(q)) if p != q => Err(Error::MissingNegativePrompt(p.to_string())),
        _ => Ok(()),
    }
}

/// Mean squared error of the winner prediction.
pub fn sft_loss<S: Scalar>(eps_true: &Tensor<S>, eps_theta_w: &Tensor<S>) -> Result<S> {
    eps_true.ensure_same_shape(eps_theta_w, "sft")?;
    let n = S::from_usize(eps_true.len()).unwrap();
    Ok(eps_true.data().iter().zip(eps_theta_w.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / n)
}

/// Gradient of [`sft_loss`] w.r.t. `eps_theta_w`.
pub fn sft_loss_grad<S: Scalar>(eps_true: &Tensor<S>, eps_theta_w: &Tensor<S>) -> Result<Tensor<S>> {
    eps_true.ensure_same_shape(eps_theta_w, "sft")?;
    let k = S::lit(2.0) / S::from_usize(eps_true.len()).unwrap();
    Ok(eps_theta_w.zip_map(eps_true, |p, e| k * (p - e)))
}

fn evaluate<S: Scalar>(b: &NoisePredictionBatch<S>, want_grad: bool) -> Result<(LossValue<S>, Option<LossGradients<S>>)> {
    let bt = b.beta * S::from_usize(b.t_max).unwrap();
    let channels = b.eps_true.channels();
    let mut per_instance = Vec::with_capacity(b.masks.len());
    let mut inner = Vec::with_capacity(b.masks.len());
    let mut total = S::zero();
    let mut grads = want_grad.then(|| LossGradients {
        eps_true: b.eps_true.zeros_like(),
        eps_theta_w: b.eps_true.zeros_like(),
        eps_ref_w: b.eps_true.zeros_like(),
        eps_theta_l: b.eps_true.zeros_like(),
        eps_ref_l: b.eps_true.zeros_like(),
    });
    for (mask, &w) in b.masks.iter().zip(&b.weights.weights) {
        let err = |hat: &Tensor<S>| masked_error(&b.eps_true, hat, mask, b.gamma, b.reduction);
        let delta = (err(&b.eps_theta_w)? - err(&b.eps_ref_w)?) - (err(&b.eps_theta_l)? - err(&b.eps_ref_l)?);
        let z = -bt * delta;
        let term = neg_log_sigmoid(z);
        per_instance.push(term);
        inner.push(z);
        total += w * term;

        if let Some(g) = grads.as_mut() {
            // d(w * term)/d(delta) = w * beta * T * sigmoid(-z)
            let d_delta = w * bt * sigmoid(-z);
            if d_delta == S::zero() {
                continue;
            }
            let k = d_delta * b.gamma * S::lit(2.0) * reduction_scale(mask, channels, b.reduction);
            let n = b.eps_true.plane_len();
            for i in 0..b.eps_true.len() {
                if !mask[i % n] {
                    continue;
                }
                let e = b.eps_true.data()[i];
                let (tw, rw, tl, rl) = (b.eps_theta_w.data()[i], b.eps_ref_w.data()[i], b.eps_theta_l.data()[i], b.eps_ref_l.data()[i]);
                g.eps_theta_w.data_mut()[i] += k * (tw - e);
                g.eps_ref_w.data_mut()[i] -= k * (rw - e);
                g.eps_theta_l.data_mut()[i] -= k * (tl - e);
                g.eps_ref_l.data_mut()[i] += k * (rl - e);
                g.eps_true.data_mut()[i] += k * (rw - tw + tl - rl);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite loss {total}")));
    }
    Ok((LossValue { total, per_instance, inner_argument: inner }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{instance_weights, InstancePartition};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn batch(rng: &mut ChaCha8Rng, p: &InstancePartition, beta: f64, t_max: usize) -> NoisePredictionBatch<f64> {
        let (h, w) = (p.height(), p.width());
        let eps = Tensor::randn(3, h, w, rng);
        let near = |rng: &mut ChaCha8Rng| eps.zip_map(&Tensor::randn(3, h, w, rng), |a, b| a + 0.3 * b);
        NoisePredictionBatch {
            eps_theta_w: near(rng),
            eps_ref_w: near(rng),
            eps_theta_l: near(rng),
            eps_ref_l: near(rng),
            eps_true: eps,
            masks: p.masks(),
            weights: instance_weights(p),
            t: 5,
            gamma: 1.0,
            beta,
            t_max,
            reduction: ErrorReduction::Sum,
        }
    }

    fn halves() -> InstancePartition {
        InstancePartition::new(4, 4, (0..16).map(|i| u32::from(i % 4 >= 1)).collect(), None).unwrap()
    }

    #[test]
    fn scalar_dpo_values() {
        assert!((dpo_preference_loss(0.3f64, 0.3, 0.3, 0.3, 5.0) - LN_2).abs() < 1e-15);
        assert!((dpo_preference_loss(0.5f64, 0.0, 0.0, 0.0, 1.0) - 0.474_076_984_180_1).abs() < 1e-9);
        let z: f64 = 0.5;
        let swapped = dpo_preference_loss(0.0f64, 0.0, 0.5, 0.0, 1.0);
        assert!((swapped - (1.0f64 + z.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_error_cases() {
        let e = Tensor::from_vec(1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let off = e.map(|v| v - 1.0);
        assert_eq!(masked_denoise_error(&e, &e, &[true; 4], 1.0).unwrap(), 0.0);
        assert_eq!(masked_denoise_error(&e, &off, &[true; 4], 1.0).unwrap(), 4.0);
        assert_eq!(masked_denoise_error(&e, &off, &[true, false, false, true], 2.5).unwrap(), 5.0);
        assert_eq!(masked_error(&e, &off, &[true, false, false, true], 1.0, ErrorReduction::PerElementMean).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(3, 4, 4, &mut rng);
        let b = Tensor::<f64>::randn(3, 4, 4, &mut rng);
        let p = halves();
        let parts: f64 = p.masks().iter().map(|m| masked_denoise_error(&a, &b, m, 1.3).unwrap()).sum();
        let whole = masked_denoise_error(&a, &b, &[true; 16], 1.3).unwrap();
        assert!((parts - whole).abs() < 1e-12);
    }

    #[test]
    fn identity_policy_gives_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = batch(&mut rng, &halves(), 8000.0, 1000);
        b.eps_theta_w = b.eps_ref_w.clone();
        b.eps_theta_l = b.eps_ref_l.clone();
        let v = dspo_instance_loss(&b).unwrap();
        assert!((v.total - LN_2).abs() < 1e-12);
        assert!(v.inner_argument.iter().all(|z| *z == 0.0));
    }

    #[test]
    fn diffusion_dpo_saturation_value() {
        // delta = -1e-6 with beta T = 8e6 gives z = 8.
        let t = |v: f64| Tensor::from_vec(1, 1, 1, vec![v]).unwrap();
        let b = NoisePredictionBatch {
            eps_true: t(0.0),
            eps_theta_w: t(0.0),
            eps_ref_w: t(1e-3),
            eps_theta_l: t(0.0),
            eps_ref_l: t(0.0),
            masks: vec![vec![true]],
            weights: InstanceWeightVector { weights: vec![1.0] },
            t: 1,
            gamma: 1.0,
            beta: 8000.0,
            t_max: 1000,
            reduction: ErrorReduction::Sum,
        };
        let v = diffusion_dpo_loss(&b).unwrap();
        assert!((v.inner_argument[0] - 8.0).abs() < 1e-6);
        assert!((v.total - 3.3540e-4).abs() < 1e-7);
    }

    #[test]
    fn whole_image_loss_rejects_multiple_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = batch(&mut rng, &halves(), 1.0, 10);
        assert!(diffusion_dpo_loss(&b).is_err());
    }

    #[test]
    fn single_mask_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = batch(&mut rng, &InstancePartition::full(4, 4), 0.01, 10);
        let a = dspo_instance_loss(&b).unwrap().total;
        let d = diffusion_dpo_loss(&b).unwrap().total;
        assert!((a - d).abs() < 1e-12);
    }

    #[test]
    fn non_partition_masks_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = batch(&mut rng, &halves(), 1.0, 10);
        b.masks[1][0] = true; // pixel 0 now covered twice
        assert!(matches!(dspo_instance_loss(&b), Err(Error::NotAPartition(_))));
        assert!(weighted_instance_loss(&b).is_ok());
    }

    #[test]
    fn swap_negates_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = batch(&mut rng, &halves(), 0.05, 10);
        let v = dspo_instance_loss(&b).unwrap();
        let s = dspo_instance_loss(&b.swapped()).unwrap();
        for (a, c) in v.inner_argument.iter().zip(&s.inner_argument) {
            assert!((a + c).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_prompt_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = batch(&mut rng, &halves(), 0.05, 10);
        let plain = dspo_total_loss(&b, NegativePromptUse::default()).unwrap();
        assert_eq!(plain, weighted_instance_loss(&b).unwrap());
        let with = NegativePromptUse { record: Some("smooth-red"), conditioned_on: Some("smooth-red") };
        assert!(dspo_total_loss(&b, with).is_ok());
        let missing = NegativePromptUse { record: Some("smooth-red"), conditioned_on: None };
        assert!(matches!(dspo_total_loss(&b, missing), Err(Error::MissingNegativePrompt(_))));
    }

    #[test]
    fn sft_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = Tensor::<f64>::randn(3, 4, 4, &mut rng);
        assert_eq!(sft_loss(&e, &e).unwrap(), 0.0);
        let off = e.map(|v| v + 0.3);
        assert!((sft_loss(&e, &off).unwrap() - 0.09).abs() < 1e-12);
    }
}
