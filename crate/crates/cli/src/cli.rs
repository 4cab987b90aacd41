//! Command-line arguments and dispatch. Flags override the config file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dspo_core::losses::ErrorReduction;
use dspo_core::trainer::Method;

use crate::config::{JudgeKind, PipelineConfig, RecordsSource, SegmenterKind, SettingsPreset};
use crate::error::Result;
use crate::run::{RunDir, StageOutcome, DEFAULT_ROOT};
use crate::stages::Pipeline;

#[derive(Debug, Parser)]
#[command(name = "dspo", version, about = "Instance-level preference alignment pipeline for toy diffusion super-resolution")]
pub struct Cli {
    /// Directory holding all runs.
    #[arg(long, global = true, env = "DSPO_RUN_DIR", default_value = DEFAULT_ROOT)]
    pub run_dir: PathBuf,
    /// Run name; artifacts go to `<run-dir>/<name>/<stage>/`.
    #[arg(long, global = true, default_value = "default")]
    pub name: String,
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Re-run the stage even if its inputs and configuration are unchanged.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic training and held-out source images.
    MakeCorpus(CorpusArgs),
    /// Crop and degrade source images into LQ/HQ pairs.
    Degrade(DegradeArgs),
    /// Pre-train the toy SR model on the pairs.
    Pretrain(TrainArgs),
    /// Sample N candidate SR results per training LQ.
    Candidates(CandidateArgs),
    /// Compute one instance partition per training LQ.
    Segment(SegmentArgs),
    /// Score every instance of every candidate and caption-check it.
    Score(ScoreArgs),
    /// Best/Worst-of-N selection into preference records.
    Select,
    /// Serve annotation tasks and pairwise trials over HTTP.
    Serve(ServeArgs),
    /// Export human preference records from the annotation store.
    ExportHuman(DataDirArgs),
    /// Fine-tune the pre-trained model on preference records.
    Finetune(FinetuneArgs),
    /// Win rate of a fine-tuned model against the pre-trained model.
    Evaluate(EvaluateArgs),
    /// Raw and normalized metric tables of every evaluated method.
    Report,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// Training source directory (default: the run's synthetic corpus).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Held-out source directory (default: the run's synthetic corpus).
    #[arg(long)]
    pub eval_source: Option<PathBuf>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub downscale: Option<usize>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub quality: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CandidateArgs {
    /// Candidates per LQ (N).
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long, value_enum)]
    pub preset: Option<SettingsPreset>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long, value_enum)]
    pub segmenter: Option<SegmenterKind>,
    /// Label-map directory for the external segmenter.
    #[arg(long)]
    pub label_dir: Option<PathBuf>,
    /// Instances kept per image; the rest merge into background.
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub metric_suite: Option<String>,
    /// Caption similarity threshold for hallucination flags.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataDirArgs {
    /// Annotation store directory (default: `<run>/annotation`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[command(flatten)]
    pub data: DataDirArgs,
    /// Built annotation UI served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    #[arg(long)]
    pub votes_per_task: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long, value_enum)]
    pub records: Option<RecordsSource>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reduction of masked squared errors: `sum` or `per_element_mean`.
    #[arg(long, value_parser = parse_reduction)]
    pub reduction: Option<ErrorReduction>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, value_enum)]
    pub judge: Option<JudgeKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// Caption used as the negative prompt at inference time.
    #[arg(long)]
    pub neg_prompt: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataDirArgs,
}

fn parse_reduction(s: &str) -> std::result::Result<ErrorReduction, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown reduction `{s}` (sum, per_element_mean)"))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Cli {
    /// Config file (if any) with this invocation's flags applied.
    pub fn resolved_config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        match &self.command {
            Command::MakeCorpus(a) => {
                set(&mut c.corpus.train_count, a.count);
                set(&mut c.corpus.test_count, a.test_count);
                set(&mut c.corpus.size, a.size);
                set(&mut c.corpus.seed, a.seed);
            }
            Command::Degrade(a) => {
                set(&mut c.degrade.source, a.source.clone().map(Some));
                set(&mut c.degrade.eval_source, a.eval_source.clone().map(Some));
                set(&mut c.degrade.crop, a.crop);
                set(&mut c.degrade.downscale, a.downscale);
                set(&mut c.degrade.blur_sigma, a.blur_sigma);
                set(&mut c.degrade.noise_sigma, a.noise_sigma);
                set(&mut c.degrade.quality, a.quality);
                set(&mut c.degrade.seed, a.seed);
            }
            Command::Pretrain(a) => {
                set(&mut c.pretrain.learning_rate, a.lr);
                set(&mut c.pretrain.batch_size, a.batch);
                set(&mut c.pretrain.max_steps, a.max_steps);
                set(&mut c.pretrain.seed, a.seed);
            }
            Command::Candidates(a) => {
                set(&mut c.candidates.count, a.candidates);
                set(&mut c.candidates.preset, a.preset);
                set(&mut c.candidates.seed, a.seed);
            }
            Command::Segment(a) => {
                set(&mut c.segment.segmenter, a.segmenter);
                set(&mut c.segment.label_dir, a.label_dir.clone().map(Some));
                set(&mut c.segment.top_k, a.top_k);
            }
            Command::Score(a) => {
                set(&mut c.score.metric_suite, a.metric_suite.clone());
                set(&mut c.score.tau, a.tau);
            }
            Command::Select | Command::Report => {}
            Command::Serve(a) => {
                set(&mut c.serve.port, a.port);
                set(&mut c.serve.data_dir, a.data.data_dir.clone().map(Some));
                set(&mut c.serve.ui_dir, a.ui_dir.clone().map(Some));
                set(&mut c.serve.votes_per_task, a.votes_per_task.map(Some));
            }
            Command::ExportHuman(a) => set(&mut c.serve.data_dir, a.data_dir.clone().map(Some)),
            Command::Finetune(a) => {
                set(&mut c.finetune.method, a.method);
                set(&mut c.finetune.records, a.records);
                set(&mut c.finetune.learning_rate, a.lr);
                set(&mut c.finetune.batch_size, a.batch);
                set(&mut c.finetune.beta, a.beta);
                set(&mut c.finetune.max_steps, a.max_steps);
                set(&mut c.finetune.seed, a.seed);
                set(&mut c.finetune.reduction, a.reduction);
            }
            Command::Evaluate(a) => {
                set(&mut c.evaluate.method, a.method);
                set(&mut c.evaluate.rounds, a.rounds);
                set(&mut c.evaluate.judge, a.judge);
                set(&mut c.evaluate.steps, a.steps);
                set(&mut c.evaluate.cfg_scale, a.cfg_scale);
                set(&mut c.evaluate.neg_prompt, a.neg_prompt.clone().map(Some));
                set(&mut c.evaluate.seed, a.seed);
                set(&mut c.serve.data_dir, a.data.data_dir.clone().map(Some));
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Runs the selected subcommand; `None` for the long-running server.
    pub fn execute(&self) -> Result<Option<StageOutcome>> {
        let run = RunDir::named(&self.run_dir, &self.name);
        let p = Pipeline::new(run, self.resolved_config()?, self.force)?;
        let outcome = match &self.command {
            Command::MakeCorpus(_) => p.make_corpus()?,
            Command::Degrade(_) => p.degrade()?,
            Command::Pretrain(_) => p.pretrain()?,
            Command::Candidates(_) => p.candidates()?,
            Command::Segment(_) => p.segment()?,
            Command::Score(_) => p.score()?,
            Command::Select => p.select()?,
            Command::Serve(_) => {
                p.serve()?;
                return Ok(None);
            }
            Command::ExportHuman(_) => p.export_human()?,
            Command::Finetune(_) => p.finetune()?,
            Command::Evaluate(_) => p.evaluate()?,
            Command::Report => p.report()?,
        };
        Ok(Some(outcome))
    }
}
