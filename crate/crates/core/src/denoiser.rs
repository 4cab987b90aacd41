//! The toy conditional noise predictor `eps(x_t, t | x_LQ, prompt)`.
//!
//! A small convolutional encoder-decoder (two stride-2 stages, residual
//! mid blocks, skip connections) that sees the noised image concatenated
//! with the bicubic-upsampled LQ. Timestep and prompt tokens enter through
//! a shared embedding that biases every block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::nn::{self, Conv2d, ConvCache, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Prompt id reserved for "no prompt".
pub const NULL_PROMPT: u32 = 0;

const FREQ_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Working resolution (square), divisible by 4.
    pub resolution: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
    /// Prompt vocabulary size including the null row.
    pub vocab_size: usize,
    /// Timestep range the embedding is normalized to.
    pub t_max: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { resolution: 64, base_channels: 16, embed_dim: 32, vocab_size: 64, t_max: 100, init_seed: 0 }
    }
}

/// Maps free-text captions to prompt-table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptVocab {
    size: usize,
}

impl PromptVocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument("prompt vocabulary needs a null row plus one token".into()));
        }
        Ok(Self { size })
    }

    /// Deterministic non-null token for a caption (FNV-1a bucket).
    pub fn token(&self, caption: &str) -> u32 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in caption.trim().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        1 + (h % (self.size as u64 - 1)) as u32
    }
}

/// Conditioning for one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle<S> {
    /// Bicubic-upsampled LQ in model space (`[-1, 1]`, channel-first).
    pub lq_upsampled: Tensor<S>,
    pub prompt_id: Option<u32>,
    pub negative_prompt_id: Option<u32>,
    /// Strength multiplier on the prompt path.
    pub adapter_scale: f64,
}

impl<S: Scalar> ConditioningBundle<S> {
    pub fn new(lq_upsampled: &RasterImage<S>) -> Self {
        Self { lq_upsampled: lq_upsampled.to_model_tensor(), prompt_id: None, negative_prompt_id: None, adapter_scale: 1.0 }
    }

    /// Upsamples `lq` by `factor` first.
    pub fn from_lq(lq: &RasterImage<S>, factor: usize) -> Result<Self> {
        Ok(Self::new(&lq.bicubic_upsample(factor)?))
    }

    pub fn with_prompt(mut self, prompt: Option<u32>) -> Self {
        self.prompt_id = prompt;
        self
    }

    pub fn with_negative(mut self, negative: Option<u32>) -> Self {
        self.negative_prompt_id = negative;
        self
    }

    pub fn with_adapter_scale(mut self, scale: f64) -> Self {
        self.adapter_scale = scale;
        self
    }
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams<S> {
    pub config: DenoiserConfig,
    time_fc1: Linear<S>,
    time_fc2: Linear<S>,
    /// `vocab x embed`, row 0 is the null prompt.
    prompt_table: Vec<S>,
    /// `vocab x embed`, added only when a negative prompt is present.
    negative_table: Vec<S>,
    conv_in: Conv2d<S>,
    emb_in: Linear<S>,
    down1: Conv2d<S>,
    emb_down1: Linear<S>,
    mid1: Conv2d<S>,
    emb_mid1: Linear<S>,
    down2: Conv2d<S>,
    emb_down2: Linear<S>,
    mid2: Conv2d<S>,
    emb_mid2: Linear<S>,
    up1: Conv2d<S>,
    up2: Conv2d<S>,
    conv_out: Conv2d<S>,
}

struct Block<S> {
    cache: ConvCache<S>,
    pre: Tensor<S>,
}

/// Activations retained for [`DenoiserParams::backward`].
pub struct ForwardCache<S> {
    freq: Vec<S>,
    t1_pre: Vec<S>,
    cond_pre: Vec<S>,
    cond: Vec<S>,
    prompt: usize,
    negative: Option<usize>,
    adapter_scale: S,
    b_in: Block<S>,
    b_down1: Block<S>,
    b_mid1: Block<S>,
    b_down2: Block<S>,
    b_mid2: Block<S>,
    b_up1: Block<S>,
    b_up2: Block<S>,
    out_cache: ConvCache<S>,
}

impl<S: Scalar> DenoiserParams<S> {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        if config.resolution == 0 || config.resolution % 4 != 0 {
            return Err(Error::InvalidArgument(format!("resolution {} not divisible by 4", config.resolution)));
        }
        if config.base_channels == 0 || config.embed_dim == 0 || config.t_max < 2 {
            return Err(Error::InvalidArgument(format!("degenerate denoiser config {config:?}")));
        }
        PromptVocab::new(config.vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (c, e) = (config.base_channels, config.embed_dim);
        let table = |rng: &mut ChaCha8Rng| Tensor::<S>::randn(1, config.vocab_size, e, rng).scale(S::lit(0.5)).into_data();
        let mut prompt_table = table(&mut rng);
        prompt_table[..e].iter_mut().for_each(|v| *v = S::zero());
        let negative_table = table(&mut rng);
        Ok(Self {
            config,
            time_fc1: Linear::new(FREQ_DIM, e, 1.0, &mut rng),
            time_fc2: Linear::new(e, e, 1.0, &mut rng),
            prompt_table,
            negative_table,
            conv_in: Conv2d::new(6, c, 1, 1.0, &mut rng),
            emb_in: Linear::new(e, c, 0.5, &mut rng),
            down1: Conv2d::new(c, 2 * c, 2, 1.0, &mut rng),
            emb_down1: Linear::new(e, 2 * c, 0.5, &mut rng),
            mid1: Conv2d::new(2 * c, 2 * c, 1, 0.5, &mut rng),
            emb_mid1: Linear::new(e, 2 * c, 0.5, &mut rng),
            down2: Conv2d::new(2 * c, 4 * c, 2, 1.0, &mut rng),
            emb_down2: Linear::new(e, 4 * c, 0.5, &mut rng),
            mid2: Conv2d::new(4 * c, 4 * c, 1, 0.5, &mut rng),
            emb_mid2: Linear::new(e, 4 * c, 0.5, &mut rng),
            up1: Conv2d::new(4 * c, 2 * c, 1, 0.5, &mut rng),
            up2: Conv2d::new(2 * c, c, 1, 0.5, &mut rng),
            conv_out: Conv2d::new(c, 3, 1, 0.2, &mut rng),
        })
    }

    /// Same structure, all zeros; the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.buffers_mut() {
            b.iter_mut().for_each(|v| *v = S::zero());
        }
        z
    }

    /// Every parameter buffer, in a fixed order.
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<S>> {
        let Self {
            config: _,
            time_fc1,
            time_fc2,
            prompt_table,
            negative_table,
            conv_in,
            emb_in,
            down1,
            emb_down1,
            mid1,
            emb_mid1,
            down2,
            emb_down2,
            mid2,
            emb_mid2,
            up1,
            up2,
            conv_out,
        } = self;
        let mut out = vec![&mut time_fc1.weight, &mut time_fc1.bias, &mut time_fc2.weight, &mut time_fc2.bias, prompt_table, negative_table];
        for conv in [conv_in, down1, mid1, down2, mid2, up1, up2, conv_out] {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        for lin in [emb_in, emb_down1, emb_mid1, emb_down2, emb_mid2] {
            out.push(&mut lin.weight);
            out.push(&mut lin.bias);
        }
        out
    }

    pub fn buffers(&self) -> Vec<&Vec<S>> {
        let mut out: Vec<&Vec<S>> = vec![&self.time_fc1.weight, &self.time_fc1.bias, &self.time_fc2.weight, &self.time_fc2.bias, &self.prompt_table, &self.negative_table];
        for conv in [&self.conv_in, &self.down1, &self.mid1, &self.down2, &self.mid2, &self.up1, &self.up2, &self.conv_out] {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        for lin in [&self.emb_in, &self.emb_down1, &self.emb_mid1, &self.emb_down2, &self.emb_mid2] {
            out.push(&lin.weight);
            out.push(&lin.bias);
        }
        out
    }

    /// Flattened copy of every parameter in buffer order.
    pub fn flat(&self) -> Vec<S> {
        self.buffers().into_iter().flatten().copied().collect()
    }

    pub fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> S {
        self.buffers().iter().flat_map(|b| b.iter()).map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserParams<T> {
        let mut out = DenoiserParams::<T>::new(self.config).expect("config already validated");
        for (dst, src) in out.buffers_mut().into_iter().zip(self.buffers()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::from_f64_lossy(s.as_f64());
            }
        }
        out
    }

    fn check_inputs(&self, x_t: &Tensor<S>, t: usize, cond: &ConditioningBundle<S>) -> Result<()> {
        let r = self.config.resolution;
        if x_t.shape() != (3, r, r) {
            return Err(Error::ShapeMismatch(format!("x_t {:?}, working resolution 3x{r}x{r}", x_t.shape())));
        }
        x_t.ensure_same_shape(&cond.lq_upsampled, "x_t vs conditioning")?;
        if t == 0 || t > self.config.t_max {
            return Err(Error::TimestepOutOfRange { t, max: self.config.t_max });
        }
        for id in [cond.prompt_id, cond.negative_prompt_id].into_iter().flatten() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::InvalidArgument(format!("prompt id {id} outside vocabulary {}", self.config.vocab_size)));
            }
        }
        Ok(())
    }

    fn timestep_features(&self, t: usize) -> Vec<S> {
        let pos = t as f64 * 1000.0 / self.config.t_max as f64;
        let half = FREQ_DIM / 2;
        let mut f = Vec::with_capacity(FREQ_DIM);
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            f.push(S::lit((pos * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            f.push(S::lit((pos * freq).cos()));
        }
        f
    }

    /// Noise prediction; output has the shape of `x_t`.
    pub fn predict_noise(&self, x_t: &Tensor<S>, t: usize, cond: &ConditioningBundle<S>) -> Result<Tensor<S>> {
        Ok(self.forward(x_t, t, cond)?.0)
    }

    pub fn forward(&self, x_t: &Tensor<S>, t: usize, cond: &ConditioningBundle<S>) -> Result<(Tensor<S>, ForwardCache<S>)> {
        self.check_inputs(x_t, t, cond)?;
        let e = self.config.embed_dim;
        let freq = self.timestep_features(t);
        let t1_pre = self.time_fc1.forward(&freq);
        let t1: Vec<S> = t1_pre.iter().map(|&v| nn::silu(v)).collect();
        let mut cond_pre = self.time_fc2.forward(&t1);
        let prompt = cond.prompt_id.unwrap_or(NULL_PROMPT) as usize;
        let negative = cond.negative_prompt_id.map(|n| n as usize);
        let a = S::lit(cond.adapter_scale);
        for j in 0..e {
            cond_pre[j] += a * self.prompt_table[prompt * e + j];
            if let Some(n) = negative {
                cond_pre[j] += a * self.negative_table[n * e + j];
            }
        }
        let cond_vec: Vec<S> = cond_pre.iter().map(|&v| nn::silu(v)).collect();

        let block = |conv: &Conv2d<S>, emb: Option<&Linear<S>>, x: &Tensor<S>| -> (Tensor<S>, Block<S>) {
            let (mut pre, cache) = conv.forward(x);
            if let Some(emb) = emb {
                nn::add_channel_bias(&mut pre, &emb.forward(&cond_vec));
            }
            (nn::silu_tensor(&pre), Block { cache, pre })
        };

        let input = x_t.concat_channels(&cond.lq_upsampled)?;
        let (h_in, b_in) = block(&self.conv_in, Some(&self.emb_in), &input);
        let (h_d1, b_down1) = block(&self.down1, Some(&self.emb_down1), &h_in);
        let (mut h_m1, b_mid1) = block(&self.mid1, Some(&self.emb_mid1), &h_d1);
        h_m1.add_assign(&h_d1);
        let (h_d2, b_down2) = block(&self.down2, Some(&self.emb_down2), &h_m1);
        let (mut h_m2, b_mid2) = block(&self.mid2, Some(&self.emb_mid2), &h_d2);
        h_m2.add_assign(&h_d2);
        let (mut h_u1, b_up1) = block(&self.up1, None, &nn::upsample_nearest2(&h_m2));
        h_u1.add_assign(&h_m1);
        let (mut h_u2, b_up2) = block(&self.up2, None, &nn::upsample_nearest2(&h_u1));
        h_u2.add_assign(&h_in);
        let (out, out_cache) = self.conv_out.forward(&h_u2);

        let cache = ForwardCache {
            freq,
            t1_pre,
            cond_pre,
            cond: cond_vec,
            prompt,
            negative,
            adapter_scale: a,
            b_in,
            b_down1,
            b_mid1,
            b_down2,
            b_mid2,
            b_up1,
            b_up2,
            out_cache,
        };
        Ok((out, cache))
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    pub fn backward(&self, cache: &ForwardCache<S>, d_out: &Tensor<S>, grad: &mut Self) {
        let e = self.config.embed_dim;
        let mut d_cond = vec![S::zero(); e];

        // Backward through one block: returns d(input) and accumulates the
        // embedding-bias gradient into d_cond.
        let block_back = |conv: &Conv2d<S>,
                          g_conv: &mut Conv2d<S>,
                          emb: Option<(&Linear<S>, &mut Linear<S>)>,
                          b: &Block<S>,
                          d_h: &Tensor<S>,
                          d_cond: &mut Vec<S>|
         -> Tensor<S> {
            let d_pre = nn::silu_backward(&b.pre, d_h);
            if let Some((emb, g_emb)) = emb {
                let d_bias = nn::channel_sums(&d_pre);
                let dc = emb.backward(&cache.cond, &d_bias, g_emb);
                for (acc, v) in d_cond.iter_mut().zip(dc) {
                    *acc += v;
                }
            }
            conv.backward(&b.cache, &d_pre, g_conv)
        };

        let d_hu2 = self.conv_out.backward(&cache.out_cache, d_out, &mut grad.conv_out);
        // h_u2 = up2_block(up(h_u1)) + h_in
        let mut d_hin = d_hu2.clone();
        let d_up_u1 = block_back(&self.up2, &mut grad.up2, None, &cache.b_up2, &d_hu2, &mut d_cond);
        let d_hu1 = nn::upsample_nearest2_backward(&d_up_u1);
        // h_u1 = up1_block(up(h_m2)) + h_m1
        let mut d_hm1 = d_hu1.clone();
        let d_up_m2 = block_back(&self.up1, &mut grad.up1, None, &cache.b_up1, &d_hu1, &mut d_cond);
        let d_hm2 = nn::upsample_nearest2_backward(&d_up_m2);
        // h_m2 = mid2_block(h_d2) + h_d2
        let mut d_hd2 = d_hm2.clone();
        d_hd2.add_assign(&block_back(&self.mid2, &mut grad.mid2, Some((&self.emb_mid2, &mut grad.emb_mid2)), &cache.b_mid2, &d_hm2, &mut d_cond));
        // h_d2 = down2_block(h_m1)
        d_hm1.add_assign(&block_back(&self.down2, &mut grad.down2, Some((&self.emb_down2, &mut grad.emb_down2)), &cache.b_down2, &d_hd2, &mut d_cond));
        // h_m1 = mid1_block(h_d1) + h_d1
        let mut d_hd1 = d_hm1.clone();
        d_hd1.add_assign(&block_back(&self.mid1, &mut grad.mid1, Some((&self.emb_mid1, &mut grad.emb_mid1)), &cache.b_mid1, &d_hm1, &mut d_cond));
        // h_d1 = down1_block(h_in)
        d_hin.add_assign(&block_back(&self.down1, &mut grad.down1, Some((&self.emb_down1, &mut grad.emb_down1)), &cache.b_down1, &d_hd1, &mut d_cond));
        // h_in = in_block(concat(x_t, lq)); the input gradient is not needed.
        block_back(&self.conv_in, &mut grad.conv_in, Some((&self.emb_in, &mut grad.emb_in)), &cache.b_in, &d_hin, &mut d_cond);

        // cond = silu(cond_pre), cond_pre = fc2(silu(fc1(freq))) + a * (P[p] + N[n])
        let d_cond_pre: Vec<S> = d_cond.iter().zip(&cache.cond_pre).map(|(&g, &x)| g * nn::silu_grad(x)).collect();
        for j in 0..e {
            grad.prompt_table[cache.prompt * e + j] += cache.adapter_scale * d_cond_pre[j];
            if let Some(n) = cache.negative {
                grad.negative_table[n * e + j] += cache.adapter_scale * d_cond_pre[j];
            }
        }
        let t1: Vec<S> = cache.t1_pre.iter().map(|&v| nn::silu(v)).collect();
        let d_t1 = self.time_fc2.backward(&t1, &d_cond_pre, &mut grad.time_fc2);
        let d_t1_pre: Vec<S> = d_t1.iter().zip(&cache.t1_pre).map(|(&g, &x)| g * nn::silu_grad(x)).collect();
        self.time_fc1.backward(&cache.freq, &d_t1_pre, &mut grad.time_fc1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig { resolution: 8, base_channels: 2, embed_dim: 4, vocab_size: 5, t_max: 10, init_seed: 3 }
    }

    fn cond(rng: &mut ChaCha8Rng, r: usize) -> ConditioningBundle<f64> {
        let lq = RasterImage::from_fn(r, r, |x, y| [x as f64 / r as f64, y as f64 / r as f64, 0.5]);
        let mut c = ConditioningBundle::new(&lq).with_prompt(Some(2)).with_negative(Some(3)).with_adapter_scale(0.7);
        c.lq_upsampled = c.lq_upsampled.zip_map(&Tensor::randn(3, r, r, rng), |a, b| a + 0.1 * b);
        c
    }

    #[test]
    fn output_shape_and_determinism() {
        let p = DenoiserParams::<f32>::new(DenoiserConfig::default()).unwrap();
        assert!(p.num_params() <= 2_000_000);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(3, 64, 64, &mut rng);
        let c = ConditioningBundle::new(&RasterImage::constant(64, 64, [0.5, 0.5, 0.5]));
        for t in [1, 50, 100] {
            let a = p.predict_noise(&x, t, &c).unwrap();
            let b = p.predict_noise(&x, t, &c).unwrap();
            assert_eq!(a.shape(), x.shape());
            assert_eq!(a, b);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = DenoiserParams::<f32>::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ConditioningBundle::new(&RasterImage::constant(8, 8, [0.5; 3]));
        let wrong = Tensor::randn(3, 12, 12, &mut rng);
        assert!(matches!(p.predict_noise(&wrong, 1, &c), Err(Error::ShapeMismatch(_))));
        let x = Tensor::randn(3, 8, 8, &mut rng);
        assert!(p.predict_noise(&x, 0, &c).is_err());
        assert!(p.predict_noise(&x, 11, &c).is_err());
        assert!(p.predict_noise(&x, 1, &c.clone().with_prompt(Some(9))).is_err());
        assert!(DenoiserParams::<f32>::new(DenoiserConfig { resolution: 10, ..small_config() }).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = DenoiserParams::<f64>::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(3, 8, 8, &mut rng);
        let c = cond(&mut rng, 8);
        let probe = Tensor::randn(3, 8, 8, &mut rng);
        let t = 4;
        let loss = |p: &DenoiserParams<f64>| -> f64 {
            p.predict_noise(&x, t, &c).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward(&x, t, &c).unwrap();
        let mut grad = p.zeros_like();
        p.backward(&cache, &probe, &mut grad);
        let analytic = grad.flat();
        let base = p.flat();
        assert_eq!(analytic.len(), base.len());

        // Perturb each parameter in turn through the same buffer order.
        let h = 1e-5;
        let mut checked = 0;
        for idx in (0..base.len()).step_by(7) {
            let perturbed = |delta: f64| {
                let mut q = p.clone();
                let mut k = 0;
                for b in q.buffers_mut() {
                    if idx >= k && idx < k + b.len() {
                        b[idx - k] += delta;
                    }
                    k += b.len();
                }
                loss(&q)
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let a = analytic[idx];
            let scale = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() / scale < 1e-4, "param {idx}: analytic {a} vs fd {fd}");
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn prompts_change_the_prediction() {
        let p = DenoiserParams::<f64>::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(3, 8, 8, &mut rng);
        let c = cond(&mut rng, 8);
        let a = p.predict_noise(&x, 3, &c.clone().with_prompt(Some(1))).unwrap();
        let b = p.predict_noise(&x, 3, &c.clone().with_prompt(Some(2))).unwrap();
        let n = p.predict_noise(&x, 3, &c.clone().with_negative(None)).unwrap();
        assert_ne!(a, b);
        assert_ne!(n, p.predict_noise(&x, 3, &c).unwrap());
    }

    #[test]
    fn vocab_tokens_are_stable_and_non_null() {
        let v = PromptVocab::new(64).unwrap();
        assert_eq!(v.token("smooth-red"), v.token("smooth-red"));
        for caption in ["a", "b", "smooth-blue textured-red", ""] {
            let t = v.token(caption);
            assert!(t >= 1 && t < 64);
        }
        assert!(PromptVocab::new(1).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let p = DenoiserParams::<f64>::new(small_config()).unwrap();
        let q: DenoiserParams<f64> = p.cast::<f64>();
        assert_eq!(p, q);
    }
}
