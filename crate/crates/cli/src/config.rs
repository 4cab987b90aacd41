//! The pipeline configuration file: one TOML table per stage. Every table
//! rejects unknown keys, and every key has a default, so an empty file is a
//! valid configuration.

use std::path::{Path, PathBuf};

use dspo_core::degrade::DegradationConfig;
use dspo_core::denoiser::DenoiserConfig;
use dspo_core::losses::ErrorReduction;
use dspo_core::preference::GenSettings;
use dspo_core::trainer::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub degrade: DegradeConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub candidates: CandidatesConfig,
    pub segment: SegmentConfig,
    pub score: ScoreConfig,
    pub finetune: FinetuneConfig,
    pub evaluate: EvaluateConfig,
    pub serve: ServeConfig,
}

/// Synthetic source images written by `make-corpus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { train_count: 16, test_count: 16, size: 96, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    /// Training source directory; defaults to the run's synthetic corpus.
    pub source: Option<PathBuf>,
    /// Held-out source directory; defaults to the run's synthetic corpus.
    pub eval_source: Option<PathBuf>,
    /// HQ crop side (also the model's working resolution).
    pub crop: usize,
    pub downscale: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub quality: u8,
    pub second_order: bool,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        let d = DegradationConfig::default();
        Self {
            source: None,
            eval_source: None,
            crop: 64,
            downscale: d.downscale,
            blur_sigma: d.blur_sigma,
            noise_sigma: d.noise_sigma,
            quality: d.compression_quality,
            second_order: d.second_order,
            seed: d.seed,
        }
    }
}

impl DegradeConfig {
    pub fn degradation(&self) -> DegradationConfig {
        DegradationConfig {
            blur_sigma: self.blur_sigma,
            noise_sigma: self.noise_sigma,
            downscale: self.downscale,
            compression_quality: self.quality,
            second_order: self.second_order,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub embed_dim: usize,
    /// Prompt vocabulary size, including the null prompt.
    pub vocab_size: usize,
    /// Diffusion schedule length T.
    pub t_max: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self { base_channels: 8, embed_dim: d.embed_dim, vocab_size: d.vocab_size, t_max: d.t_max, init_seed: d.init_seed }
    }
}

impl ModelConfig {
    pub fn denoiser(&self, resolution: usize) -> DenoiserConfig {
        DenoiserConfig {
            resolution,
            base_channels: self.base_channels,
            embed_dim: self.embed_dim,
            vocab_size: self.vocab_size,
            t_max: self.t_max,
            init_seed: self.init_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub prompt_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: 1e-3,
            batch_size: d.batch_size,
            max_steps: 1500,
            seed: d.seed,
            checkpoint_every: 500,
            weight_decay: d.weight_decay,
            grad_clip: d.grad_clip,
            prompt_dropout: d.prompt_dropout,
        }
    }
}

impl PretrainConfig {
    pub fn train_config(&self, t_max: usize) -> TrainConfig {
        TrainConfig {
            method: Method::Pretrain,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            seed: self.seed,
            t_max,
            checkpoint_every: self.checkpoint_every,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            prompt_dropout: self.prompt_dropout,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SettingsPreset {
    MultiStep,
    OneStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidatesConfig {
    /// Candidates per LQ (N); the first N settings are used.
    pub count: usize,
    pub preset: SettingsPreset,
    /// Explicit settings; replaces the preset when non-empty.
    pub settings: Vec<GenSettings>,
    pub seed: u64,
}

impl Default for CandidatesConfig {
    fn default() -> Self {
        Self { count: 4, preset: SettingsPreset::MultiStep, settings: Vec::new(), seed: 0 }
    }
}

impl CandidatesConfig {
    pub fn resolved_settings(&self) -> Vec<GenSettings> {
        let all = if self.settings.is_empty() {
            match self.preset {
                SettingsPreset::MultiStep => GenSettings::multi_step_defaults(),
                SettingsPreset::OneStep => GenSettings::one_step_defaults(),
            }
        } else {
            self.settings.clone()
        };
        all.into_iter().take(self.count).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SegmenterKind {
    Grid,
    Region,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub segmenter: SegmenterKind,
    /// Tiles per side for the grid segmenter.
    pub grid_tiles: usize,
    /// Colour distance threshold for the region-growing segmenter.
    pub region_threshold: f64,
    /// Directory of `<lq_id>.png` label maps for the external segmenter.
    pub label_dir: Option<PathBuf>,
    pub top_k: usize,
    /// Drop the merged background instance from preference terms and
    /// renormalize the remaining weights.
    pub exclude_background: bool,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { segmenter: SegmenterKind::Region, grid_tiles: 4, region_threshold: 0.12, label_dir: None, top_k: 5, exclude_background: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Metric suite name; `builtin` is the only suite shipped.
    pub metric_suite: String,
    /// Caption similarity below which a candidate caption is flagged.
    pub tau: f64,
    /// External captioning command (`program arg...`); the PNG path is
    /// appended. Empty selects the builtin histogram captioner.
    pub caption_command: Vec<String>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { metric_suite: "builtin".into(), tau: dspo_core::caption::DEFAULT_TAU, caption_command: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RecordsSource {
    /// Records from the automatic `select` stage.
    Auto,
    /// Records from the `export-human` stage.
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub method: Method,
    pub records: RecordsSource,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub reduction: ErrorReduction,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            method: Method::Dspo,
            records: RecordsSource::Auto,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            beta: d.beta,
            max_steps: d.max_steps,
            seed: d.seed,
            checkpoint_every: d.checkpoint_every,
            weight_decay: d.weight_decay,
            grad_clip: d.grad_clip,
            // summed errors saturate the sigmoid at the toy scale; see README
            reduction: ErrorReduction::PerElementMean,
        }
    }
}

impl FinetuneConfig {
    pub fn train_config(&self, t_max: usize) -> TrainConfig {
        TrainConfig {
            method: self.method,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            beta: self.beta,
            max_steps: self.max_steps,
            seed: self.seed,
            t_max,
            checkpoint_every: self.checkpoint_every,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            reduction: self.reduction,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeKind {
    /// Automatic IQA judge against the ground truth.
    Auto,
    /// Pairwise human choices collected by the annotation service.
    HumanRecords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Fine-tuned method whose outputs are compared with the pre-trained model.
    pub method: Method,
    /// Independent rounds; each round re-samples every output with its own seed.
    pub rounds: usize,
    pub judge: JudgeKind,
    pub steps: usize,
    pub cfg_scale: f64,
    /// Caption used as the negative prompt at inference time.
    pub neg_prompt: Option<String>,
    pub seed: u64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { method: Method::Dspo, rounds: 3, judge: JudgeKind::Auto, steps: 50, cfg_scale: 5.5, neg_prompt: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub port: u16,
    /// Annotation store directory; defaults to `<run>/annotation`.
    pub data_dir: Option<PathBuf>,
    /// Built annotation UI to serve at `/`.
    pub ui_dir: Option<PathBuf>,
    /// Distinct annotators after which a task is closed; unset keeps tasks open.
    pub votes_per_task: Option<usize>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { port: 8080, data_dir: None, ui_dir: None, votes_per_task: None }
    }
}

impl PipelineConfig {
    /// Parses a TOML file; unknown keys are rejected with their location.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![format!("{}: {}", origin.display(), e.to_string().trim())]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { context: format!("reading config {}", path.display()), source })?;
        Self::from_toml_str(&text, path)
    }

    /// Checks every section and reports all offending keys at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, key: &str, why: String| {
            if !ok {
                bad.push(format!("{key}: {why}"));
            }
        };
        let c = &self.corpus;
        check(c.train_count >= 1, "corpus.train_count", "must be at least 1".into());
        check(c.size >= self.degrade.crop, "corpus.size", format!("{} is smaller than degrade.crop {}", c.size, self.degrade.crop));
        let d = &self.degrade;
        check(d.crop >= 8 && d.crop % 4 == 0, "degrade.crop", format!("{} must be a multiple of 4 and at least 8", d.crop));
        check(d.downscale >= 1 && d.crop % d.downscale.max(1) == 0, "degrade.downscale", format!("{} must divide degrade.crop {}", d.downscale, d.crop));
        check(d.blur_sigma >= 0.0 && d.blur_sigma.is_finite(), "degrade.blur_sigma", "must be finite and non-negative".into());
        check(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite(), "degrade.noise_sigma", "must be finite and non-negative".into());
        check((1..=100).contains(&d.quality), "degrade.quality", format!("{} outside 1..=100", d.quality));
        let m = &self.model;
        check(m.base_channels >= 1, "model.base_channels", "must be at least 1".into());
        check(m.embed_dim >= 1, "model.embed_dim", "must be at least 1".into());
        check(m.vocab_size >= 2, "model.vocab_size", "must be at least 2".into());
        check(m.t_max >= 1, "model.t_max", "must be at least 1".into());
        let p = &self.pretrain;
        check(p.learning_rate > 0.0, "pretrain.learning_rate", "must be positive".into());
        check(p.batch_size >= 1, "pretrain.batch_size", "must be at least 1".into());
        check((0.0..1.0).contains(&p.prompt_dropout), "pretrain.prompt_dropout", "must lie in [0, 1)".into());
        let k = &self.candidates;
        let settings = k.resolved_settings();
        check(k.count >= 2, "candidates.count", format!("{} is below the minimum of 2", k.count));
        check(settings.len() == k.count, "candidates.count", format!("{} exceeds the {} available settings", k.count, settings.len()));
        for s in &settings {
            check(s.validate().is_ok(), "candidates.settings", format!("setting `{}` is invalid", s.label));
        }
        let s = &self.segment;
        check(s.top_k >= 1, "segment.top_k", "must be at least 1".into());
        check(s.grid_tiles >= 1, "segment.grid_tiles", "must be at least 1".into());
        check(s.segmenter != SegmenterKind::External || s.label_dir.is_some(), "segment.label_dir", "required by the external segmenter".into());
        check(self.score.metric_suite == "builtin", "score.metric_suite", format!("unknown suite `{}` (available: builtin)", self.score.metric_suite));
        check((0.0..=1.0).contains(&self.score.tau), "score.tau", "must lie in [0, 1]".into());
        let f = &self.finetune;
        check(f.method != Method::Pretrain, "finetune.method", "must be dspo, diffusion-dpo or sft".into());
        check(f.learning_rate > 0.0, "finetune.learning_rate", "must be positive".into());
        check(f.batch_size >= 1, "finetune.batch_size", "must be at least 1".into());
        check(f.beta > 0.0, "finetune.beta", "must be positive".into());
        let e = &self.evaluate;
        check(e.method != Method::Pretrain, "evaluate.method", "must be dspo, diffusion-dpo or sft".into());
        check(e.rounds >= 1, "evaluate.rounds", "must be at least 1".into());
        check(e.steps >= 1, "evaluate.steps", "must be at least 1".into());
        check(e.cfg_scale >= 0.0, "evaluate.cfg_scale", "must be non-negative".into());
        check(self.serve.votes_per_task != Some(0), "serve.votes_per_task", "must be at least 1 when set".into());
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }
}
