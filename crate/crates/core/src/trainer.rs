//! Pre-training and preference fine-tuning of the toy denoiser, with AdamW,
//! gradient clipping, atomic checkpoints and a JSONL loss log.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::write_atomic;
use crate::denoiser::{ConditioningBundle, DenoiserParams};
use crate::error::{Error, IoContext, Result};
use crate::losses::{
    diffusion_dpo_loss_with_grad, dspo_total_loss_with_grad, sft_loss, sft_loss_grad, ErrorReduction, LossGradients, LossValue, NegativePromptUse,
    NoisePredictionBatch,
};
use crate::partition::InstanceWeightVector;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pretrain,
    Dspo,
    DiffusionDpo,
    Sft,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pretrain => "pretrain",
            Method::Dspo => "dspo",
            Method::DiffusionDpo => "diffusion-dpo",
            Method::Sft => "sft",
        }
    }

    /// Whether training reads loser images.
    pub fn uses_losers(self) -> bool {
        matches!(self, Method::Dspo | Method::DiffusionDpo)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Method::Pretrain),
            "dspo" => Ok(Method::Dspo),
            "diffusion-dpo" => Ok(Method::DiffusionDpo),
            "sft" => Ok(Method::Sft),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}` (pretrain, dspo, diffusion-dpo, sft)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub t_max: usize,
    pub checkpoint_every: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub reduction: ErrorReduction,
    /// Probability of replacing the prompt with the null prompt during
    /// pre-training.
    pub prompt_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dspo,
            learning_rate: 5e-5,
            batch_size: 4,
            beta: 8000.0,
            max_steps: 2000,
            seed: 0,
            t_max: 100,
            checkpoint_every: 200,
            weight_decay: 0.01,
            grad_clip: 1.0,
            reduction: ErrorReduction::Sum,
            prompt_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::InvalidArgument(r.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be > 0");
        }
        if self.t_max < 2 {
            return bad("t_max must be >= 2");
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return bad("prompt_dropout must be in [0, 1]");
        }
        Ok(())
    }

    /// Hash of everything except `max_steps`, so a run can be extended.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.max_steps = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    m: DenoiserParams<S>,
    v: DenoiserParams<S>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &DenoiserParams<S>, lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut DenoiserParams<S>, grad: &DenoiserParams<S>) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (lr, wd, eps) = (S::lit(self.lr), S::lit(self.weight_decay), S::lit(self.eps));
        let (bc1, bc2) = (S::lit(bc1), S::lit(bc2));
        let bufs = params.buffers_mut().into_iter().zip(grad.buffers()).zip(self.m.buffers_mut()).zip(self.v.buffers_mut());
        for (((p, g), m), v) in bufs {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = p[i] - lr * (update + wd * p[i]);
            }
        }
    }
}

/// Read-only reference model for preference fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDenoiser<S>(DenoiserParams<S>);

impl<S: Scalar> FrozenDenoiser<S> {
    pub fn params(&self) -> &DenoiserParams<S> {
        &self.0
    }

    pub fn fingerprint(&self) -> String {
        params_fingerprint(&self.0)
    }
}

/// Deep copy of `params` that training cannot mutate.
pub fn clone_freeze_reference<S: Scalar>(params: &DenoiserParams<S>) -> FrozenDenoiser<S> {
    FrozenDenoiser(params.clone())
}

/// SHA-256 over every parameter's `f64` bit pattern, in buffer order.
pub fn params_fingerprint<S: Scalar>(params: &DenoiserParams<S>) -> String {
    let mut h = Sha256::new();
    for b in params.buffers() {
        for v in b {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Training state; reloading it continues bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<S> {
    pub step: usize,
    pub params: DenoiserParams<S>,
    pub optimizer: AdamW<S>,
    pub config_hash: String,
    pub loss_history: Vec<f64>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn fresh(params: DenoiserParams<S>, cfg: &TrainConfig) -> Self {
        let optimizer = AdamW::new(&params, cfg.learning_rate, cfg.weight_decay);
        Self { step: 0, params, optimizer, config_hash: cfg.fingerprint(), loss_history: Vec::new() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).io_context(|| format!("reading checkpoint {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Min / mean / max of the preference argument `z` over the batch.
    pub inner_argument: Option<[f64; 3]>,
}

/// Optional on-disk side effects of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl TrainOutputs {
    fn log(&self, entry: &LogEntry) -> Result<()> {
        let Some(path) = &self.log_path else { return Ok(()) };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).io_context(|| format!("opening {}", path.display()))?;
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        f.write_all(&line).io_context(|| format!("appending to {}", path.display()))
    }

    fn checkpoint<S: Scalar>(&self, ck: &Checkpoint<S>) -> Result<()> {
        let Some(dir) = &self.checkpoint_dir else { return Ok(()) };
        ck.save(&dir.join(format!("step-{:06}.json", ck.step)))?;
        ck.save(&dir.join("latest.json"))
    }

    fn dump(&self, step: usize, detail: &serde_json::Value) -> Result<PathBuf> {
        let dir = self.checkpoint_dir.clone().unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("nonfinite-step-{step:06}.json"));
        write_atomic(&path, &serde_json::to_vec_pretty(detail)?)?;
        Ok(path)
    }
}

/// One pre-training example: the conditioning (LQ and prompt) and the HQ target.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample<S> {
    pub cond: ConditioningBundle<S>,
    pub hq: Tensor<S>,
}

/// One preference record ready for training. `loser` and `mask` are absent
/// when the method does not read them.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSample<S> {
    pub cond: ConditioningBundle<S>,
    pub winner: Tensor<S>,
    pub loser: Option<Tensor<S>>,
    pub mask: Option<Vec<bool>>,
    pub weight: S,
    pub negative_prompt: Option<String>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn check_resume<S: Scalar>(state: &Checkpoint<S>, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if state.config_hash != cfg.fingerprint() {
        return Err(Error::InvalidArgument("checkpoint was produced under a different training config".into()));
    }
    if state.params.config.t_max != cfg.t_max {
        return Err(Error::InvalidArgument(format!("model T={} but config T={}", state.params.config.t_max, cfg.t_max)));
    }
    Ok(())
}

fn clip_and_step<S: Scalar>(state: &mut Checkpoint<S>, grad: &mut DenoiserParams<S>, cfg: &TrainConfig) -> f64 {
    let norm = grad.global_norm().as_f64();
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let k = S::lit(cfg.grad_clip / norm);
        for b in grad.buffers_mut() {
            b.iter_mut().for_each(|v| *v *= k);
        }
    }
    state.optimizer.step(&mut state.params, grad);
    norm
}

/// Noise-prediction pre-training (`|| eps - eps_theta ||^2`, mean over
/// elements) until `cfg.max_steps`.
pub fn pretrain<S: Scalar>(
    mut state: Checkpoint<S>,
    samples: &[PretrainSample<S>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<Checkpoint<S>> {
    if cfg.method != Method::Pretrain {
        return Err(Error::InvalidArgument(format!("pretrain called with method {}", cfg.method.name())));
    }
    check_resume(&state, cfg)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no pre-training pairs".into()));
    }
    while state.step < cfg.max_steps {
        let mut rng = step_rng(cfg.seed, state.step);
        let mut grad = state.params.zeros_like();
        let mut loss = 0.0;
        let inv_b = S::lit(1.0 / cfg.batch_size as f64);
        let mut drawn = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..samples.len());
            let t = rng.random_range(1..=cfg.t_max);
            let drop = rng.random::<f64>() < cfg.prompt_dropout;
            let s = &samples[idx];
            let eps = Tensor::randn(3, s.hq.height(), s.hq.width(), &mut rng);
            let x_t = schedule.forward_noise(&s.hq, t, &eps)?;
            let cond = if drop { s.cond.clone().with_prompt(None) } else { s.cond.clone() };
            let (pred, cache) = state.params.forward(&x_t, t, &cond)?;
            loss += sft_loss(&eps, &pred)?.as_f64() / cfg.batch_size as f64;
            let d = sft_loss_grad(&eps, &pred)?.scale(inv_b);
            state.params.backward(&cache, &d, &mut grad);
            drawn.push((idx, t));
        }
        if !loss.is_finite() || !grad.is_finite() {
            let dump = outputs.dump(state.step, &serde_json::json!({ "step": state.step, "loss": loss.to_string(), "samples": drawn }))?;
            return Err(Error::NonFiniteLoss { step: state.step, dump });
        }
        let grad_norm = clip_and_step(&mut state, &mut grad, cfg);
        state.step += 1;
        state.loss_history.push(loss);
        outputs.log(&LogEntry { step: state.step, loss, grad_norm, inner_argument: None })?;
        if state.step % cfg.checkpoint_every.max(1) == 0 || state.step == cfg.max_steps {
            outputs.checkpoint(&state)?;
        }
    }
    Ok(state)
}

/// Loss and preference argument for one sample at a fixed `(t, eps)`.
struct SampleEval {
    loss: f64,
    z: Option<f64>,
}

fn full_mask(len: usize) -> Vec<bool> {
    vec![true; len]
}

/// Evaluates one sample's loss; when `grad` is given, accumulates
/// `scale * d(loss)/d(params)` into it.
#[allow(clippy::too_many_arguments)]
fn eval_sample<S: Scalar>(
    policy: &DenoiserParams<S>,
    reference: &FrozenDenoiser<S>,
    sample: &PreferenceSample<S>,
    t: usize,
    eps: &Tensor<S>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    grad: Option<(&mut DenoiserParams<S>, S)>,
) -> Result<SampleEval> {
    let x_w = schedule.forward_noise(&sample.winner, t, eps)?;
    if cfg.method == Method::Sft {
        let (pred, cache) = policy.forward(&x_w, t, &sample.cond)?;
        let loss = sft_loss(eps, &pred)?.as_f64();
        if let Some((g, k)) = grad {
            policy.backward(&cache, &sft_loss_grad(eps, &pred)?.scale(k), g);
        }
        return Ok(SampleEval { loss, z: None });
    }
    let loser = sample.loser.as_ref().ok_or_else(|| Error::InvalidArgument(format!("method {} needs loser images", cfg.method.name())))?;
    let x_l = schedule.forward_noise(loser, t, eps)?;
    // Diffusion-DPO is conditioned without negative prompts.
    let cond = if cfg.method == Method::Dspo { sample.cond.clone() } else { sample.cond.clone().with_negative(None) };
    let (theta_w, cache_w) = policy.forward(&x_w, t, &cond)?;
    let (theta_l, cache_l) = policy.forward(&x_l, t, &cond)?;
    let ref_w = reference.params().predict_noise(&x_w, t, &cond)?;
    let ref_l = reference.params().predict_noise(&x_l, t, &cond)?;
    let plane = eps.plane_len();
    let (masks, weights) = match cfg.method {
        Method::Dspo => {
            let mask = sample.mask.clone().ok_or_else(|| Error::InvalidArgument("method dspo needs instance masks".into()))?;
            (vec![mask], InstanceWeightVector { weights: vec![sample.weight] })
        }
        _ => (vec![full_mask(plane)], InstanceWeightVector::uniform_single()),
    };
    let batch = NoisePredictionBatch {
        eps_true: eps.clone(),
        eps_theta_w: theta_w,
        eps_ref_w: ref_w,
        eps_theta_l: theta_l,
        eps_ref_l: ref_l,
        masks,
        weights,
        t,
        gamma: S::lit(schedule.gamma(t)?),
        beta: S::lit(cfg.beta),
        t_max: cfg.t_max,
        reduction: cfg.reduction,
    };
    let (value, grads): (LossValue<S>, LossGradients<S>) = if cfg.method == Method::Dspo {
        let conditioned = cond.negative_prompt_id.and(sample.negative_prompt.as_deref());
        dspo_total_loss_with_grad(&batch, NegativePromptUse { record: sample.negative_prompt.as_deref(), conditioned_on: conditioned })?
    } else {
        diffusion_dpo_loss_with_grad(&batch)?
    };
    if let Some((g, k)) = grad {
        policy.backward(&cache_w, &grads.eps_theta_w.scale(k), g);
        policy.backward(&cache_l, &grads.eps_theta_l.scale(k), g);
    }
    Ok(SampleEval { loss: value.total.as_f64(), z: value.inner_argument.first().map(|z| z.as_f64()) })
}

fn check_finetune_inputs<S: Scalar>(policy: &DenoiserParams<S>, reference: &FrozenDenoiser<S>, samples: &[PreferenceSample<S>], cfg: &TrainConfig) -> Result<()> {
    if !matches!(cfg.method, Method::Dspo | Method::DiffusionDpo | Method::Sft) {
        return Err(Error::InvalidArgument(format!("finetune called with method {}", cfg.method.name())));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no preference records to train on".into()));
    }
    if cfg.method == Method::Dspo {
        if let Some(i) = samples.iter().position(|s| s.mask.is_none()) {
            return Err(Error::InvalidArgument(format!("record {i} has no instance mask (required for dspo)")));
        }
        if let Some(i) = samples.iter().position(|s| !(s.weight > S::zero())) {
            return Err(Error::InvalidArgument(format!("record {i} has non-positive instance weight")));
        }
    }
    if policy.config != reference.params().config {
        return Err(Error::InvalidArgument("policy and reference architectures differ".into()));
    }
    Ok(())
}

/// Preference fine-tuning (or SFT on winners) against a frozen reference,
/// one record per batch slot, one `(t, eps)` draw per record per step. The
/// DSPO batch loss is the instance-weighted mean of the record losses.
pub fn finetune<S: Scalar>(
    mut state: Checkpoint<S>,
    reference: &FrozenDenoiser<S>,
    samples: &[PreferenceSample<S>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<Checkpoint<S>> {
    check_resume(&state, cfg)?;
    check_finetune_inputs(&state.params, reference, samples, cfg)?;
    while state.step < cfg.max_steps {
        let mut rng = step_rng(cfg.seed, state.step);
        let mut grad = state.params.zeros_like();
        let mut loss = 0.0;
        let mut zs = Vec::new();
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..samples.len());
            let t = rng.random_range(1..=cfg.t_max);
            let s = &samples[idx];
            draws.push((idx, t, Tensor::randn(3, s.winner.height(), s.winner.width(), &mut rng)));
        }
        let norm = batch_normalizer(draws.iter().map(|(idx, _, _)| &samples[*idx]), cfg)?;
        for (idx, t, eps) in &draws {
            let e = eval_sample(&state.params, reference, &samples[*idx], *t, eps, schedule, cfg, Some((&mut grad, S::lit(1.0 / norm))))?;
            loss += e.loss / norm;
            zs.extend(e.z);
        }
        let drawn: Vec<(usize, usize)> = draws.iter().map(|(idx, t, _)| (*idx, *t)).collect();
        if !loss.is_finite() || !grad.is_finite() {
            let dump = outputs.dump(
                state.step,
                &serde_json::json!({ "step": state.step, "loss": loss.to_string(), "samples": drawn, "inner_argument": zs.iter().map(|z| z.to_string()).collect::<Vec<_>>() }),
            )?;
            return Err(Error::NonFiniteLoss { step: state.step, dump });
        }
        let grad_norm = clip_and_step(&mut state, &mut grad, cfg);
        state.step += 1;
        state.loss_history.push(loss);
        let inner_argument = (!zs.is_empty()).then(|| {
            let min = zs.iter().copied().fold(f64::INFINITY, f64::min);
            let max = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            [min, zs.iter().sum::<f64>() / zs.len() as f64, max]
        });
        outputs.log(&LogEntry { step: state.step, loss, grad_norm, inner_argument })?;
        if state.step % cfg.checkpoint_every.max(1) == 0 || state.step == cfg.max_steps {
            outputs.checkpoint(&state)?;
        }
    }
    Ok(state)
}

/// Mean loss of `policy` over every sample, with `(t, eps)` drawn from
/// `seed` per sample; no parameters change.
pub fn evaluate_preference_loss<S: Scalar>(
    policy: &DenoiserParams<S>,
    reference: &FrozenDenoiser<S>,
    samples: &[PreferenceSample<S>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    check_finetune_inputs(policy, reference, samples, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for s in samples {
        let t = rng.random_range(1..=cfg.t_max);
        let eps = Tensor::randn(3, s.winner.height(), s.winner.width(), &mut rng);
        total += eval_sample(policy, reference, s, t, &eps, schedule, cfg, None)?.loss;
    }
    Ok(total / batch_normalizer(samples.iter(), cfg)?)
}

/// Denominator of a batch loss: the summed instance weights for DSPO (so
/// the loss is a weighted mean and equals ln 2 when policy and reference
/// coincide), the record count otherwise.
fn batch_normalizer<'a, S: Scalar + 'a>(batch: impl Iterator<Item = &'a PreferenceSample<S>>, cfg: &TrainConfig) -> Result<f64> {
    let (count, weight) = batch.fold((0usize, 0.0), |(n, w), s| (n + 1, w + s.weight.as_f64()));
    if cfg.method != Method::Dspo {
        return Ok(count as f64);
    }
    if weight <= 0.0 {
        return Err(Error::InvalidArgument("preference batch has zero total instance weight".into()));
    }
    Ok(weight)
}
