//! Instance-level preference alignment for diffusion super-resolution.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`degrade`] synthesizes LQ/HQ pairs (blur, downscale, noise, block-DCT
//!   quantization) and persists them as a JSONL manifest.
//! * [`denoiser`], [`schedule`] and [`sampler`] implement a small
//!   LQ-conditioned noise-prediction network, the DDPM noise schedule and
//!   spaced ancestral sampling with classifier-free guidance.
//! * [`partition`] turns segmenter output into a disjoint, covering instance
//!   partition with area weights.
//! * [`metrics`], [`caption`] and [`preference`] score candidate SR results
//!   per instance, select Best/Worst-of-N pairs, flag hallucinated captions
//!   and emit preference records.
//! * [`losses`] and [`trainer`] implement the preference objectives and the
//!   pre-training / fine-tuning loops.
//! * [`eval`] judges outputs pairwise and reports win rates and metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for callers that do not need the generality.

pub mod caption;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod preference;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision image.
pub type Image32 = image::RasterImage<f32>;
/// Double-precision image.
pub type Image64 = image::RasterImage<f64>;
/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision model parameters (the training default).
pub type Params32 = denoiser::DenoiserParams<f32>;
/// Double-precision model parameters (gradient checks and oracles).
pub type Params64 = denoiser::DenoiserParams<f64>;
/// Single-precision training state.
pub type Checkpoint32 = trainer::Checkpoint<f32>;
/// Double-precision loss batch.
pub type LossBatch64 = losses::NoisePredictionBatch<f64>;
