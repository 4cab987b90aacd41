//! One function per pipeline stage. Each reads its upstream artifacts from
//! the run directory, writes into its own stage directory, and is skipped
//! when nothing it depends on has changed.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use dspo_annotation::{AnnotationStore, CandidateCrop, PairwiseTrial, ServerConfig, StoreConfig, TaskSpec};
use dspo_core::caption::{Captioner, CommandCaptioner, HistogramCaptioner};
use dspo_core::degrade::{build_pair_dataset, file_hash, item_seed, read_jsonl, read_pair_manifest, write_atomic, write_jsonl, PairRecord, PairedSample, PAIR_MANIFEST};
use dspo_core::denoiser::{ConditioningBundle, DenoiserParams, PromptVocab};
use dspo_core::eval::{export_report, mean_metrics, win_rate, win_rate_from_choices, win_rate_from_rounds, AutomaticJudge, MethodMetrics, WinRateResult};
use dspo_core::image::RasterImage;
use dspo_core::metrics::{BuiltinSuite, MetricSuite};
use dspo_core::partition::{
    instance_weights, segment_partition, top_k_largest, ExternalSegmenter, GridSegmenter, InstancePartition, RegionGrowingSegmenter, Segmenter,
};
use dspo_core::preference::{
    build_records, export_jsonl, generate_candidates, import_jsonl, instance_crop, score_instances, AutoAnnotator, Candidate, CandidateSet, GenSettings,
    HallucinationFlag, InstanceOutcome, PreferenceRecord, RecordContext,
};
use dspo_core::sampler::{ddpm_sample, PromptConditioning, SamplerConfig};
use dspo_core::schedule::{linear_schedule, NoiseSchedule};
use dspo_core::synth::write_synthetic_corpus;
use dspo_core::trainer::{
    clone_freeze_reference, evaluate_preference_loss, finetune, pretrain, Checkpoint, LogEntry, Method, PreferenceSample, PretrainSample, TrainConfig,
    TrainOutputs,
};
use serde::{Deserialize, Serialize};

use crate::config::{JudgeKind, PipelineConfig, RecordsSource, SegmenterKind};
use crate::error::{io_err, CliError, Result};
use crate::run::{RunDir, StageOutcome};

pub const CORPUS: &str = "corpus";
pub const DEGRADE: &str = "degrade";
pub const PRETRAIN: &str = "pretrain";
pub const CANDIDATES: &str = "candidates";
pub const SEGMENT: &str = "segment";
pub const SCORE: &str = "score";
pub const SELECT: &str = "select";
pub const EXPORT_HUMAN: &str = "export-human";
pub const REPORT: &str = "report";

/// Final model of a training stage.
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG: &str = "log.jsonl";
pub const TRAIN_SUMMARY: &str = "summary.json";
pub const PREFERENCES_FILE: &str = "preferences.jsonl";
pub const WIN_RATE_FILE: &str = "win_rate.json";
pub const EVAL_METRICS_FILE: &str = "metrics.json";
/// Label used for the pre-trained model in evaluation tables.
pub const PRETRAINED_LABEL: &str = "pretrained";
/// Training steps averaged for the reported final training loss.
pub const FINAL_LOSS_WINDOW: usize = 100;

pub fn finetune_stage(method: Method) -> String {
    format!("finetune-{}", method.name())
}

pub fn evaluate_stage(method: Method) -> String {
    format!("evaluate-{}", method.name())
}

type Img = RasterImage<f32>;

/// Generated candidates of one LQ image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSetEntry {
    pub lq_id: String,
    pub candidates: Vec<CandidateEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateEntry {
    pub settings: GenSettings,
    pub seed: u64,
    /// PNG path relative to the run directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionEntry {
    pub lq_id: String,
    /// Label-map PNG relative to the run directory; the sidecar sits next
    /// to it with a `.json` extension.
    pub label_map: String,
    pub instances: usize,
}

/// Automatic scores of one LQ image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreEntry {
    pub lq_id: String,
    pub mask_path: String,
    pub candidate_labels: Vec<String>,
    pub candidate_paths: Vec<String>,
    pub instances: Vec<InstanceScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceScore {
    pub instance_id: usize,
    pub weight: f64,
    /// Raw metric values per candidate, in the fixed metric order.
    pub metrics: Vec<[f64; 8]>,
    /// Normalized aggregate score per candidate.
    pub aggregate: Vec<f64>,
    pub flags: Vec<HallucinationFlag>,
}

/// What a fine-tuning stage reports besides its model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub records: usize,
    pub steps: usize,
    /// Training loss of the first step (policy identical to the reference).
    pub step0_loss: f64,
    /// Mean training loss over the last `FINAL_LOSS_WINDOW` steps.
    pub final_loss: f64,
    /// Fixed-draw loss over all records before and after training.
    pub eval_loss_before: f64,
    pub eval_loss_after: f64,
}

/// Win-rate result plus how it was judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub method: Method,
    pub judge: JudgeKind,
    pub result: WinRateResult,
}

pub struct Pipeline {
    pub run: RunDir,
    pub config: PipelineConfig,
    pub force: bool,
}

fn rel_pairs(run: &RunDir, records: Vec<PairRecord>) -> Vec<PairRecord> {
    records
        .into_iter()
        .map(|r| PairRecord { hq_path: run.relative(&r.hq_path).into(), lq_path: run.relative(&r.lq_path).into(), ..r })
        .collect()
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(write_atomic(path, &serde_json::to_vec_pretty(value)?)?)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

impl Pipeline {
    pub fn new(run: RunDir, config: PipelineConfig, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self { run, config, force })
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(linear_schedule(self.config.model.t_max)?)
    }

    fn vocab(&self) -> Result<PromptVocab> {
        Ok(PromptVocab::new(self.config.model.vocab_size)?)
    }

    /// Prompt token of an LQ image: the caption of its bicubic upsampling.
    fn prompt_token(&self, lq: &Img) -> Result<u32> {
        let up = lq.bicubic_upsample(self.config.degrade.downscale)?;
        Ok(self.vocab()?.token(&Captioner::<f32>::caption(&HistogramCaptioner::default(), &up)?))
    }

    fn conditioning(&self, lq: &Img) -> Result<ConditioningBundle<f32>> {
        Ok(ConditioningBundle::from_lq(lq, self.config.degrade.downscale)?.with_prompt(Some(self.prompt_token(lq)?)))
    }

    pub fn pairs(&self, split: &str) -> Result<Vec<PairedSample<f32>>> {
        let manifest = self.run.stage_dir(DEGRADE).join(split).join(PAIR_MANIFEST);
        if !manifest.is_file() {
            return Err(CliError::MissingUpstream { stage: DEGRADE.into(), path: manifest });
        }
        read_pair_manifest(&manifest)?
            .into_iter()
            .map(|r| PairRecord { hq_path: self.run.resolve(&r.hq_path), lq_path: self.run.resolve(&r.lq_path), ..r }.load())
            .map(|r| r.map_err(CliError::from))
            .collect()
    }

    fn pairs_by_id(&self, split: &str) -> Result<BTreeMap<String, PairedSample<f32>>> {
        Ok(self.pairs(split)?.into_iter().map(|p| (p.id.clone(), p)).collect())
    }

    pub fn load_model(&self, stage: &str) -> Result<DenoiserParams<f32>> {
        let path = self.run.stage_dir(stage).join(MODEL_FILE);
        if !path.is_file() {
            return Err(CliError::MissingUpstream { stage: stage.into(), path });
        }
        Ok(Checkpoint::<f32>::load(&path)?.params)
    }

    fn load_image(&self, rel: &str) -> Result<Img> {
        Ok(RasterImage::load_png(&self.run.resolve(rel))?)
    }

    fn load_partition(&self, rel: &str) -> Result<InstancePartition> {
        let png = self.run.resolve(rel);
        Ok(InstancePartition::load(&png, &png.with_extension("json"))?)
    }

    fn suite(&self) -> BuiltinSuite {
        BuiltinSuite
    }

    fn captioner(&self) -> Box<dyn Captioner<f32>> {
        match self.config.score.caption_command.split_first() {
            Some((program, args)) => Box::new(CommandCaptioner { program: program.into(), args: args.to_vec() }),
            None => Box::new(HistogramCaptioner::default()),
        }
    }

    pub fn make_corpus(&self) -> Result<StageOutcome> {
        let c = &self.config.corpus;
        self.run.run_stage(CORPUS, c, &[], self.force, |dir| {
            write_synthetic_corpus(&dir.join("train"), c.train_count, c.size, c.seed)?;
            if c.test_count > 0 {
                write_synthetic_corpus(&dir.join("test"), c.test_count, c.size, c.seed.wrapping_add(0x5eed_0001))?;
            }
            Ok(())
        })
    }

    pub fn degrade(&self) -> Result<StageOutcome> {
        let d = &self.config.degrade;
        let uses_corpus = d.source.is_none() || d.eval_source.is_none();
        let upstream: &[&str] = if uses_corpus { &[CORPUS] } else { &[] };
        let train_src = d.source.clone().unwrap_or_else(|| self.run.stage_dir(CORPUS).join("train"));
        let test_src = d.eval_source.clone().unwrap_or_else(|| self.run.stage_dir(CORPUS).join("test"));
        for src in [&train_src, &test_src] {
            if !src.is_dir() && !uses_corpus {
                return Err(CliError::MissingUpstream { stage: DEGRADE.into(), path: src.clone() });
            }
        }
        self.run.run_stage(DEGRADE, d, upstream, self.force, |dir| {
            let cfg = d.degradation();
            for (split, src) in [("train", &train_src), ("test", &test_src)] {
                if !src.is_dir() {
                    continue;
                }
                let out = dir.join(split);
                // the held-out split gets its own noise stream
                let split_cfg = if split == "test" { cfg.reseeded(cfg.seed.wrapping_add(1)) } else { cfg };
                let records = build_pair_dataset(src, &out, &split_cfg, d.crop)?;
                write_jsonl(&out.join(PAIR_MANIFEST), &rel_pairs(&self.run, records))?;
            }
            Ok(())
        })
    }

    pub fn pretrain(&self) -> Result<StageOutcome> {
        let cfg = self.config.pretrain.train_config(self.config.model.t_max);
        let stage_cfg = serde_json::json!({ "model": self.config.model, "pretrain": cfg, "crop": self.config.degrade.crop });
        self.run.run_stage(PRETRAIN, &stage_cfg, &[DEGRADE], self.force, |dir| {
            let samples = self
                .pairs("train")?
                .iter()
                .map(|p| Ok(PretrainSample { cond: self.conditioning(&p.lq)?, hq: p.hq.to_model_tensor() }))
                .collect::<Result<Vec<_>>>()?;
            let params = DenoiserParams::<f32>::new(self.config.model.denoiser(self.config.degrade.crop))?;
            let outputs = TrainOutputs { checkpoint_dir: Some(dir.join("checkpoints")), log_path: Some(dir.join(TRAIN_LOG)) };
            let state = resume_or_fresh(params, &cfg, &outputs)?;
            let done = pretrain(state, &samples, &self.schedule()?, &cfg, &outputs)?;
            done.save(&dir.join(MODEL_FILE))?;
            Ok(())
        })
    }

    pub fn candidates(&self) -> Result<StageOutcome> {
        let k = &self.config.candidates;
        let settings = k.resolved_settings();
        let stage_cfg = serde_json::json!({ "settings": settings, "seed": k.seed });
        self.run.run_stage(CANDIDATES, &stage_cfg, &[DEGRADE, PRETRAIN], self.force, |dir| {
            let params = self.load_model(PRETRAIN)?;
            let schedule = self.schedule()?;
            let mut entries = Vec::new();
            for p in self.pairs("train")? {
                let prompts = PromptConditioning { prompt_id: Some(self.prompt_token(&p.lq)?), ..Default::default() };
                let set = generate_candidates(&params, &schedule, &p.id, &p.lq, &settings, &prompts, k.seed)?;
                let mut candidates = Vec::new();
                for c in &set.candidates {
                    let path = dir.join(&p.id).join(format!("{}.png", c.settings.label));
                    c.image.save_png(&path)?;
                    candidates.push(CandidateEntry { settings: c.settings.clone(), seed: c.seed, path: self.run.relative(&path) });
                }
                log::info!("candidates for {}: {}", p.id, set.labels().join(", "));
                entries.push(CandidateSetEntry { lq_id: p.id.clone(), candidates });
            }
            write_jsonl(&dir.join("sets.jsonl"), &entries)?;
            Ok(())
        })
    }

    fn segmenter(&self, lq_id: &str) -> Box<dyn Segmenter<f32>> {
        let s = &self.config.segment;
        match s.segmenter {
            SegmenterKind::Grid => Box::new(GridSegmenter { tiles_x: s.grid_tiles, tiles_y: s.grid_tiles }),
            SegmenterKind::Region => Box::new(RegionGrowingSegmenter { threshold: s.region_threshold }),
            SegmenterKind::External => {
                Box::new(ExternalSegmenter { label_map: s.label_dir.clone().unwrap_or_default().join(format!("{lq_id}.png")) })
            }
        }
    }

    /// One shared partition per LQ, computed on its bicubic upsampling and
    /// applied identically to every candidate.
    pub fn segment(&self) -> Result<StageOutcome> {
        let s = &self.config.segment;
        let stage_cfg = serde_json::json!({ "segment": s, "downscale": self.config.degrade.downscale });
        self.run.run_stage(SEGMENT, &stage_cfg, &[DEGRADE], self.force, |dir| {
            let mut entries = Vec::new();
            for p in self.pairs("train")? {
                let up = p.lq.bicubic_upsample(self.config.degrade.downscale)?;
                let full = segment_partition(&up, self.segmenter(&p.id).as_ref())?;
                let part = top_k_largest(&full, s.top_k)?;
                let png = dir.join(format!("{}.png", p.id));
                part.save(&png, &png.with_extension("json"))?;
                entries.push(PartitionEntry { lq_id: p.id.clone(), label_map: self.run.relative(&png), instances: part.num_instances() });
            }
            write_jsonl(&dir.join("partitions.jsonl"), &entries)?;
            Ok(())
        })
    }

    fn candidate_sets(&self) -> Result<Vec<CandidateSetEntry>> {
        Ok(read_jsonl(&self.run.stage_dir(CANDIDATES).join("sets.jsonl"))?)
    }

    fn partitions(&self) -> Result<BTreeMap<String, PartitionEntry>> {
        let list: Vec<PartitionEntry> = read_jsonl(&self.run.stage_dir(SEGMENT).join("partitions.jsonl"))?;
        Ok(list.into_iter().map(|e| (e.lq_id.clone(), e)).collect())
    }

    fn load_candidate_set(&self, entry: &CandidateSetEntry) -> Result<CandidateSet<f32>> {
        let candidates = entry
            .candidates
            .iter()
            .map(|c| Ok(Candidate { image: self.load_image(&c.path)?, settings: c.settings.clone(), seed: c.seed }))
            .collect::<Result<Vec<_>>>()?;
        Ok(CandidateSet::new(entry.lq_id.clone(), candidates)?)
    }

    pub fn score(&self) -> Result<StageOutcome> {
        let sc = &self.config.score;
        let stage_cfg = serde_json::json!({ "score": sc, "exclude_background": self.config.segment.exclude_background });
        self.run.run_stage(SCORE, &stage_cfg, &[DEGRADE, CANDIDATES, SEGMENT], self.force, |dir| {
            let pairs = self.pairs_by_id("train")?;
            let partitions = self.partitions()?;
            let suite = self.suite();
            let captioner = self.captioner();
            let annotator = AutoAnnotator { suite: &suite, captioner: captioner.as_ref(), tau: sc.tau };
            let mut entries = Vec::new();
            for set_entry in self.candidate_sets()? {
                let id = &set_entry.lq_id;
                let pair = pairs.get(id).ok_or_else(|| CliError::Invalid(format!("candidates reference unknown pair `{id}`")))?;
                let part_entry = partitions.get(id).ok_or_else(|| CliError::Invalid(format!("no partition for `{id}`")))?;
                let partition = self.load_partition(&part_entry.label_map)?;
                let cands = self.load_candidate_set(&set_entry)?;
                let mut weights = instance_weights::<f32>(&partition);
                let background = partition.background().filter(|_| self.config.segment.exclude_background);
                if let Some(bg) = background {
                    weights = weights.excluding(bg as usize)?;
                }
                let raw = score_instances(&cands, &pair.hq, &partition, &suite)?;
                let outcomes = annotator.outcomes(&cands, &pair.hq, &partition, &weights)?;
                let instances = outcomes
                    .into_iter()
                    .filter(|o| background != Some(o.instance_id as u32))
                    .map(|o| InstanceScore {
                        instance_id: o.instance_id,
                        weight: o.weight as f64,
                        metrics: raw[o.instance_id].iter().map(|v| v.values.map(|x| x as f64)).collect(),
                        aggregate: o.scores.iter().map(|&x| x as f64).collect(),
                        flags: o.flags,
                    })
                    .collect();
                entries.push(ScoreEntry {
                    lq_id: id.clone(),
                    mask_path: part_entry.label_map.clone(),
                    candidate_labels: set_entry.candidates.iter().map(|c| c.settings.label.clone()).collect(),
                    candidate_paths: set_entry.candidates.iter().map(|c| c.path.clone()).collect(),
                    instances,
                });
            }
            write_jsonl(&dir.join("scores.jsonl"), &entries)?;
            Ok(())
        })
    }

    fn scores(&self) -> Result<Vec<ScoreEntry>> {
        let path = self.run.stage_dir(SCORE).join("scores.jsonl");
        if !path.is_file() {
            return Err(CliError::MissingUpstream { stage: SCORE.into(), path });
        }
        Ok(read_jsonl(&path)?)
    }

    pub fn select(&self) -> Result<StageOutcome> {
        self.run.run_stage(SELECT, &serde_json::Value::Null, &[SCORE], self.force, |dir| {
            let mut records = Vec::new();
            for e in self.scores()? {
                let outcomes: Vec<InstanceOutcome<f64>> = e
                    .instances
                    .iter()
                    .map(|i| InstanceOutcome { instance_id: i.instance_id, scores: i.aggregate.clone(), weight: i.weight, flags: i.flags.clone() })
                    .collect();
                let ctx = RecordContext { lq_id: &e.lq_id, mask_path: &e.mask_path, candidate_paths: &e.candidate_paths, candidate_labels: &e.candidate_labels };
                records.extend(build_records(&ctx, &outcomes)?);
            }
            log::info!("{} preference records", records.len());
            export_jsonl(&records, &dir.join(PREFERENCES_FILE))?;
            Ok(())
        })
    }

    pub fn annotation_dir(&self) -> PathBuf {
        self.config.serve.data_dir.clone().unwrap_or_else(|| self.run.root().join("annotation"))
    }

    fn open_store(&self) -> Result<AnnotationStore> {
        Ok(AnnotationStore::open(&self.annotation_dir(), StoreConfig { votes_per_task: self.config.serve.votes_per_task })?)
    }

    /// Fills an empty store with one task per scored instance, plus pairwise
    /// trials for every evaluated method.
    pub fn prepare_annotation(&self) -> Result<AnnotationStore> {
        let mut store = self.open_store()?;
        let files = store.files_dir();
        if store.stats().tasks == 0 {
            let pairs = self.pairs_by_id("train")?;
            let captioner = self.captioner();
            let mut specs = Vec::new();
            for e in self.scores()? {
                let partition = self.load_partition(&e.mask_path)?;
                let pair = &pairs[&e.lq_id];
                let up = pair.lq.bicubic_upsample(self.config.degrade.downscale)?;
                let images = e.candidate_paths.iter().map(|p| self.load_image(p)).collect::<Result<Vec<_>>>()?;
                for inst in &e.instances {
                    let m = inst.instance_id;
                    let base = format!("{}/inst{m}", e.lq_id);
                    let save = |img: &Img, name: &str| -> Result<String> {
                        let rel = format!("{base}/{name}.png");
                        img.save_png(&files.join(&rel))?;
                        Ok(rel)
                    };
                    let lq_crop = save(&instance_crop(&up, &partition, m)?, "lq")?;
                    let gt_reference = Some(save(&instance_crop(&pair.hq, &partition, m)?, "gt")?);
                    let mut candidates = Vec::new();
                    for ((label, path), img) in e.candidate_labels.iter().zip(&e.candidate_paths).zip(&images) {
                        let crop = instance_crop(img, &partition, m)?;
                        candidates.push(CandidateCrop { label: label.clone(), image: save(&crop, label)?, caption: captioner.caption(&crop)?, full_image: path.clone() });
                    }
                    specs.push(TaskSpec { lq_id: e.lq_id.clone(), instance_id: m, lq_crop, gt_reference, candidates, mask_path: e.mask_path.clone(), weight: inst.weight });
                }
            }
            let ids = store.create_tasks(specs)?;
            log::info!("created {} annotation tasks", ids.len());
        }
        if store.stats().trials == 0 {
            let mut trials = Vec::new();
            for method in [Method::Dspo, Method::DiffusionDpo, Method::Sft] {
                let out = self.run.stage_dir(&evaluate_stage(method)).join("outputs").join("round-0");
                if !out.is_dir() {
                    continue;
                }
                for p in self.pairs("test")? {
                    let base = format!("trials/{}/{}", method.name(), p.id);
                    let copy = |src: PathBuf, name: &str| -> Result<String> {
                        let rel = format!("{base}/{name}.png");
                        let dst = files.join(&rel);
                        std::fs::create_dir_all(dst.parent().expect("nested")).map_err(io_err(format!("creating {}", dst.display())))?;
                        std::fs::copy(&src, &dst).map_err(io_err(format!("copying {}", src.display())))?;
                        Ok(rel)
                    };
                    let lq = files.join(format!("{base}/lq.png"));
                    p.lq.bicubic_upsample(self.config.degrade.downscale)?.save_png(&lq)?;
                    trials.push(PairwiseTrial {
                        trial_id: format!("{}-{}", method.name(), p.id),
                        lq_image: format!("{base}/lq.png"),
                        image_a: copy(out.join(method.name()).join(format!("{}.png", p.id)), "a")?,
                        image_b: copy(out.join(PRETRAINED_LABEL).join(format!("{}.png", p.id)), "b")?,
                    });
                }
            }
            if !trials.is_empty() {
                log::info!("created {} pairwise trials", trials.len());
                store.add_trials(trials)?;
            }
        }
        Ok(store)
    }

    pub fn serve(&self) -> Result<()> {
        let store = self.prepare_annotation()?;
        let addr = SocketAddr::from(([127, 0, 0, 1], self.config.serve.port));
        let config = ServerConfig { addr, ui_dir: self.config.serve.ui_dir.clone() };
        let rt = tokio::runtime::Runtime::new().map_err(io_err("starting the async runtime"))?;
        rt.block_on(dspo_annotation::serve(store, config))?;
        Ok(())
    }

    fn log_hash(path: &Path) -> Result<Option<String>> {
        Ok(if path.is_file() { Some(file_hash(path)?) } else { None })
    }

    pub fn export_human(&self) -> Result<StageOutcome> {
        let data = self.annotation_dir();
        let stage_cfg = serde_json::json!({
            "data_dir": data,
            "tasks": Self::log_hash(&data.join(dspo_annotation::store::TASKS_LOG))?,
            "submissions": Self::log_hash(&data.join(dspo_annotation::store::SUBMISSIONS_LOG))?,
            "votes_per_task": self.config.serve.votes_per_task,
        });
        self.run.run_stage(EXPORT_HUMAN, &stage_cfg, &[SCORE], self.force, |dir| {
            let records = self.open_store()?.export_human_records();
            log::info!("{} human preference records", records.len());
            export_jsonl(&records, &dir.join(PREFERENCES_FILE))?;
            Ok(())
        })
    }

    /// Turns preference records into training samples.
    pub fn preference_samples(&self, records: &[PreferenceRecord]) -> Result<Vec<PreferenceSample<f32>>> {
        let pairs = self.pairs_by_id("train")?;
        let vocab = self.vocab()?;
        let mut partitions: BTreeMap<String, InstancePartition> = BTreeMap::new();
        let mut samples = Vec::with_capacity(records.len());
        for r in records {
            let pair = pairs.get(&r.lq_id).ok_or_else(|| CliError::Invalid(format!("record references unknown LQ `{}`", r.lq_id)))?;
            if !partitions.contains_key(&r.mask_path) {
                partitions.insert(r.mask_path.clone(), self.load_partition(&r.mask_path)?);
            }
            let partition = &partitions[&r.mask_path];
            if r.instance_id >= partition.num_instances() {
                return Err(CliError::Invalid(format!("{}: instance {} outside {}", r.lq_id, r.instance_id, r.mask_path)));
            }
            let cond = self.conditioning(&pair.lq)?.with_negative(r.negative_prompt.as_deref().map(|n| vocab.token(n)));
            samples.push(PreferenceSample {
                cond,
                winner: self.load_image(&r.winner_path)?.to_model_tensor(),
                loser: Some(self.load_image(&r.loser_path)?.to_model_tensor()),
                mask: Some(partition.mask(r.instance_id)),
                weight: r.weight as f32,
                negative_prompt: r.negative_prompt.clone(),
            });
        }
        Ok(samples)
    }

    pub fn finetune(&self) -> Result<StageOutcome> {
        let f = &self.config.finetune;
        let cfg = f.train_config(self.config.model.t_max);
        let records_stage = match f.records {
            RecordsSource::Auto => SELECT,
            RecordsSource::Human => EXPORT_HUMAN,
        };
        let stage = finetune_stage(f.method);
        let stage_cfg = serde_json::json!({ "train": cfg, "records": f.records });
        self.run.run_stage(&stage, &stage_cfg, &[DEGRADE, PRETRAIN, records_stage], self.force, |dir| {
            let records = import_jsonl(&self.run.stage_dir(records_stage).join(PREFERENCES_FILE))?;
            if records.is_empty() {
                return Err(CliError::Invalid(format!("no preference records in {}", self.run.stage_dir(records_stage).display())));
            }
            let samples = self.preference_samples(&records)?;
            let base = self.load_model(PRETRAIN)?;
            let reference = clone_freeze_reference(&base);
            let schedule = self.schedule()?;
            let outputs = TrainOutputs { checkpoint_dir: Some(dir.join("checkpoints")), log_path: Some(dir.join(TRAIN_LOG)) };
            let eval_seed = cfg.seed.wrapping_add(0xe7a1);
            let eval_loss_before = evaluate_preference_loss(&base, &reference, &samples, &schedule, &cfg, eval_seed)?;
            let state = resume_or_fresh(base, &cfg, &outputs)?;
            let done = finetune(state, &reference, &samples, &schedule, &cfg, &outputs)?;
            let eval_loss_after = evaluate_preference_loss(&done.params, &reference, &samples, &schedule, &cfg, eval_seed)?;
            done.save(&dir.join(MODEL_FILE))?;
            let h = &done.loss_history;
            let tail = &h[h.len().saturating_sub(FINAL_LOSS_WINDOW)..];
            let summary = TrainSummary {
                method: f.method,
                records: records.len(),
                steps: done.step,
                step0_loss: h.first().copied().unwrap_or(f64::NAN),
                final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
                eval_loss_before,
                eval_loss_after,
            };
            log::info!("{}: step-0 loss {:.6}, final loss {:.6}", stage, summary.step0_loss, summary.final_loss);
            save_json(&dir.join(TRAIN_SUMMARY), &summary)
        })
    }

    /// Samples `params` on every held-out LQ with the evaluation settings.
    fn sample_all(&self, params: &DenoiserParams<f32>, pairs: &[PairedSample<f32>], round: usize) -> Result<Vec<Img>> {
        let e = &self.config.evaluate;
        let vocab = self.vocab()?;
        let negative = e.neg_prompt.as_deref().map(|n| vocab.token(n));
        let schedule = self.schedule()?;
        pairs
            .iter()
            .map(|p| {
                let sampler = SamplerConfig { steps: e.steps, cfg_scale: e.cfg_scale, seed: item_seed(e.seed.wrapping_add(round as u64), &p.id) };
                let prompts = PromptConditioning { prompt_id: Some(self.prompt_token(&p.lq)?), negative_prompt_id: negative, adapter_scale: None };
                Ok(ddpm_sample(params, &schedule, &p.lq, &sampler, &prompts)?.0)
            })
            .collect()
    }

    pub fn evaluate(&self) -> Result<StageOutcome> {
        let e = &self.config.evaluate;
        let stage = evaluate_stage(e.method);
        let choices_log = self.annotation_dir().join(dspo_annotation::store::CHOICES_LOG);
        let choices = match e.judge {
            JudgeKind::HumanRecords if !choices_log.is_file() => {
                return Err(CliError::MissingUpstream { stage: "serve".into(), path: choices_log });
            }
            JudgeKind::HumanRecords => Self::log_hash(&choices_log)?,
            JudgeKind::Auto => None,
        };
        let stage_cfg = serde_json::json!({ "evaluate": e, "choices": choices });
        let ft_stage = finetune_stage(e.method);
        self.run.run_stage(&stage, &stage_cfg, &[DEGRADE, PRETRAIN, &ft_stage], self.force, |dir| {
            let test = self.pairs("test")?;
            if test.is_empty() {
                return Err(CliError::Invalid("the held-out split is empty".into()));
            }
            let tuned = self.load_model(&ft_stage)?;
            let base = self.load_model(PRETRAIN)?;
            let suite = self.suite();
            let gts: Vec<Img> = test.iter().map(|p| p.hq.clone()).collect();
            let mut rounds = Vec::new();
            let mut metrics = Vec::new();
            for r in 0..e.rounds {
                let a = self.sample_all(&tuned, &test, r)?;
                let b = self.sample_all(&base, &test, r)?;
                let out = dir.join("outputs").join(format!("round-{r}"));
                for ((p, ia), ib) in test.iter().zip(&a).zip(&b) {
                    ia.save_png(&out.join(e.method.name()).join(format!("{}.png", p.id)))?;
                    ib.save_png(&out.join(PRETRAINED_LABEL).join(format!("{}.png", p.id)))?;
                }
                if r == 0 {
                    for (label, imgs) in [(e.method.name(), &a), (PRETRAINED_LABEL, &b)] {
                        let vs = imgs.iter().zip(&gts).map(|(i, g)| suite.evaluate(i, g)).collect::<dspo_core::Result<Vec<_>>>()?;
                        metrics.push(MethodMetrics { method: label.to_string(), metrics: mean_metrics(&vs)? });
                    }
                }
                if e.judge == JudgeKind::Auto {
                    let mut judge = AutomaticJudge { suite: &suite };
                    let wr = win_rate(&a, &b, &gts, &mut judge, 1)?;
                    log::info!("round {r}: {:?}", wr.per_round[0]);
                    rounds.extend(wr.per_round);
                }
            }
            let result = match e.judge {
                JudgeKind::Auto => win_rate_from_rounds(&rounds)?,
                JudgeKind::HumanRecords => {
                    let prefix = format!("{}-", e.method.name());
                    let chosen: Vec<_> = self.open_store()?.pairwise_choices().into_iter().filter(|c| c.trial_id.starts_with(&prefix)).collect();
                    win_rate_from_choices(&chosen)?
                }
            };
            log::info!("win rate {:.3} (95% CI {:.3}..{:.3})", result.rate, result.ci95.0, result.ci95.1);
            save_json(&dir.join(WIN_RATE_FILE), &EvaluationSummary { method: e.method, judge: e.judge, result })?;
            save_json(&dir.join(EVAL_METRICS_FILE), &metrics)
        })
    }

    /// Every evaluation stage present in the run.
    pub fn evaluated_methods(&self) -> Vec<Method> {
        [Method::Dspo, Method::DiffusionDpo, Method::Sft].into_iter().filter(|m| self.run.manifest_path(&evaluate_stage(*m)).is_file()).collect()
    }

    pub fn report(&self) -> Result<StageOutcome> {
        let methods = self.evaluated_methods();
        if methods.is_empty() {
            let path = self.run.manifest_path(&evaluate_stage(self.config.evaluate.method));
            return Err(CliError::MissingUpstream { stage: "evaluate".into(), path });
        }
        let stages: Vec<String> = methods.iter().map(|m| evaluate_stage(*m)).collect();
        let upstream: Vec<&str> = stages.iter().map(String::as_str).collect();
        self.run.run_stage(REPORT, &serde_json::Value::Null, &upstream, self.force, |dir| {
            let mut tables: Vec<MethodMetrics> = Vec::new();
            for s in &stages {
                let rows: Vec<MethodMetrics> = load_json(&self.run.stage_dir(s).join(EVAL_METRICS_FILE))?;
                for row in rows {
                    if !tables.iter().any(|t| t.method == row.method) {
                        tables.push(row);
                    }
                }
            }
            export_report(&tables, dir)?;
            Ok(())
        })
    }
}

/// Continues from `checkpoints/latest.json` when it belongs to the same
/// training configuration, otherwise starts from `params`.
fn resume_or_fresh(params: DenoiserParams<f32>, cfg: &TrainConfig, outputs: &TrainOutputs) -> Result<Checkpoint<f32>> {
    if let Some(dir) = &outputs.checkpoint_dir {
        let latest = dir.join("latest.json");
        if latest.is_file() {
            match Checkpoint::<f32>::load(&latest) {
                Ok(ck) if ck.config_hash == cfg.fingerprint() && ck.step <= cfg.max_steps => {
                    log::info!("resuming from step {}", ck.step);
                    truncate_log(outputs, ck.step)?;
                    return Ok(ck);
                }
                Ok(_) => log::warn!("ignoring checkpoint {} from a different configuration", latest.display()),
                Err(e) => log::warn!("ignoring unreadable checkpoint {}: {e}", latest.display()),
            }
        }
    }
    if let Some(log) = &outputs.log_path {
        if log.exists() {
            std::fs::remove_file(log).map_err(io_err(format!("removing {}", log.display())))?;
        }
    }
    Ok(Checkpoint::fresh(params, cfg))
}

/// Drops log lines written after the checkpoint being resumed.
fn truncate_log(outputs: &TrainOutputs, step: usize) -> Result<()> {
    let Some(path) = &outputs.log_path else { return Ok(()) };
    if !path.is_file() {
        return Ok(());
    }
    let kept: Vec<LogEntry> = read_jsonl::<LogEntry>(path)?.into_iter().filter(|e| e.step <= step).collect();
    Ok(write_jsonl(path, &kept)?)
}
