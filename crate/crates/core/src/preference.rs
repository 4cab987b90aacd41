//! Preference-data construction: candidate generation, per-instance
//! scoring, Best/Worst-of-N selection, caption-based hallucination flags
//! and the JSONL preference dataset.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption::Captioner;
use crate::degrade::{item_seed, read_jsonl, write_jsonl};
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::metrics::{Metric, MetricSuite, MetricVector, SSIM_WINDOW};
use crate::partition::{InstancePartition, InstanceWeightVector};
use crate::sampler::{ddpm_sample, PromptConditioning, SamplerConfig};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// One sampler configuration used to produce a candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSettings {
    pub label: String,
    pub steps: usize,
    pub cfg_scale: f64,
    /// Conditioning-strength multiplier standing in for adapter rank.
    pub adapter_scale: f64,
}

impl GenSettings {
    pub fn new(label: impl Into<String>, steps: usize, cfg_scale: f64, adapter_scale: f64) -> Result<Self> {
        let s = Self { label: label.into(), steps, cfg_scale, adapter_scale };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty() {
            return Err(Error::InvalidArgument("setting label must not be empty".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument(format!("setting {}: steps must be >= 1", self.label)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("setting {}: cfg scale must be >= 0", self.label)));
        }
        if !(self.adapter_scale >= 0.0 && self.adapter_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("setting {}: adapter scale must be >= 0", self.label)));
        }
        Ok(())
    }

    /// Four multi-step candidates: 20 and 80 steps, guidance 4.5 and 10.5.
    pub fn multi_step_defaults() -> Vec<Self> {
        vec![
            Self { label: "step-20".into(), steps: 20, cfg_scale: 5.5, adapter_scale: 1.0 },
            Self { label: "step-80".into(), steps: 80, cfg_scale: 5.5, adapter_scale: 1.0 },
            Self { label: "cfg-4.5".into(), steps: 50, cfg_scale: 4.5, adapter_scale: 1.0 },
            Self { label: "cfg-10.5".into(), steps: 50, cfg_scale: 10.5, adapter_scale: 1.0 },
        ]
    }

    /// Four single-step candidates: adapter strengths for ranks 16 and 64
    /// (rank / 32), guidance 6 and 12.
    pub fn one_step_defaults() -> Vec<Self> {
        vec![
            Self { label: "rank-16".into(), steps: 1, cfg_scale: 5.5, adapter_scale: 0.5 },
            Self { label: "rank-64".into(), steps: 1, cfg_scale: 5.5, adapter_scale: 2.0 },
            Self { label: "cfg-6".into(), steps: 1, cfg_scale: 6.0, adapter_scale: 1.0 },
            Self { label: "cfg-12".into(), steps: 1, cfg_scale: 12.0, adapter_scale: 1.0 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<S> {
    pub image: RasterImage<S>,
    pub settings: GenSettings,
    pub seed: u64,
}

/// `N >= 2` SR results for one LQ image, all at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<S> {
    pub lq_id: String,
    pub candidates: Vec<Candidate<S>>,
}

impl<S: Scalar> CandidateSet<S> {
    pub fn new(lq_id: impl Into<String>, candidates: Vec<Candidate<S>>) -> Result<Self> {
        if candidates.len() < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 candidates, got {}", candidates.len())));
        }
        let dims = candidates[0].image.dims();
        if let Some(c) = candidates.iter().find(|c| c.image.dims() != dims) {
            return Err(Error::ShapeMismatch(format!("candidate {} is {:?}, expected {dims:?}", c.settings.label, c.image.dims())));
        }
        check_unique_labels(candidates.iter().map(|c| &c.settings))?;
        Ok(Self { lq_id: lq_id.into(), candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.settings.label.clone()).collect()
    }
}

fn check_unique_labels<'a>(settings: impl Iterator<Item = &'a GenSettings>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in settings {
        if !seen.insert(s.label.as_str()) {
            return Err(Error::DuplicateSetting(s.label.clone()));
        }
    }
    Ok(())
}

/// Samples one candidate per setting. Each candidate's sampler seed is
/// derived from `(seed, lq_id, label)`.
pub fn generate_candidates<S: Scalar>(
    params: &DenoiserParams<S>,
    schedule: &NoiseSchedule,
    lq_id: &str,
    lq: &RasterImage<S>,
    settings: &[GenSettings],
    prompts: &PromptConditioning,
    seed: u64,
) -> Result<CandidateSet<S>> {
    if settings.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 generation settings, got {}", settings.len())));
    }
    check_unique_labels(settings.iter())?;
    let mut candidates = Vec::with_capacity(settings.len());
    for s in settings {
        s.validate()?;
        let cand_seed = item_seed(seed, &format!("{lq_id}/{}", s.label));
        let sampler = SamplerConfig { steps: s.steps, cfg_scale: s.cfg_scale, seed: cand_seed };
        let p = PromptConditioning { adapter_scale: Some(s.adapter_scale), ..*prompts };
        let (image, _) = ddpm_sample(params, schedule, lq, &sampler, &p)?;
        candidates.push(Candidate { image, settings: s.clone(), seed: cand_seed });
    }
    CandidateSet::new(lq_id, candidates)
}

/// Bounding-box crop of an instance with out-of-mask pixels replaced by the
/// in-mask mean colour. Boxes smaller than the SSIM window are zero-padded
/// (bottom/right) up to it.
pub fn instance_crop<S: Scalar>(image: &RasterImage<S>, partition: &InstancePartition, instance: usize) -> Result<RasterImage<S>> {
    if image.dims() != (partition.width(), partition.height()) {
        return Err(Error::ShapeMismatch(format!("image {:?} vs partition {}x{}", image.dims(), partition.width(), partition.height())));
    }
    let (x0, y0, x1, y1) = partition
        .bounding_box(instance)
        .ok_or_else(|| Error::InvalidArgument(format!("instance {instance} is empty or missing")))?;
    let label = instance as u32;
    let mut sum = [0.0f64; 3];
    let mut n = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            if partition.label_at(x, y) == label {
                let p = image.pixel(x, y);
                (0..3).for_each(|c| sum[c] += p[c].as_f64());
                n += 1.0;
            }
        }
    }
    let fill = sum.map(|s| S::lit(s / n));
    let (w, h) = (x1 - x0, y1 - y0);
    let (pw, ph) = (w.max(SSIM_WINDOW), h.max(SSIM_WINDOW));
    if (pw, ph) != (w, h) {
        log::warn!("instance {instance} box {w}x{h} is below the {SSIM_WINDOW}px metric window; zero-padding to {pw}x{ph}");
    }
    Ok(RasterImage::from_fn(pw, ph, |x, y| {
        if x >= w || y >= h {
            [S::zero(); 3]
        } else if partition.label_at(x0 + x, y0 + y) == label {
            image.pixel(x0 + x, y0 + y)
        } else {
            fill
        }
    }))
}

/// Metric vectors indexed `[instance][candidate]`.
pub fn score_instances<S: Scalar>(
    cands: &CandidateSet<S>,
    gt: &RasterImage<S>,
    partition: &InstancePartition,
    suite: &dyn MetricSuite<S>,
) -> Result<Vec<Vec<MetricVector<S>>>> {
    if let Some(c) = cands.candidates.iter().find(|c| c.image.dims() != gt.dims()) {
        return Err(Error::ShapeMismatch(format!("candidate {} is {:?} but gt is {:?}", c.settings.label, c.image.dims(), gt.dims())));
    }
    let mut out = Vec::with_capacity(partition.num_instances());
    for m in 0..partition.num_instances() {
        let gt_crop = instance_crop(gt, partition, m)?;
        let mut row = Vec::with_capacity(cands.len());
        for c in &cands.candidates {
            let v = suite.evaluate(&instance_crop(&c.image, partition, m)?, &gt_crop)?;
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite metric for instance {m}, candidate {}", c.settings.label)));
            }
            row.push(v);
        }
        out.push(row);
    }
    Ok(out)
}

/// Per-metric min-max normalization across rows, flipped for lower-better
/// metrics so that 1 is always best. A constant column maps to 0.5.
pub fn normalized_table<S: Scalar>(vectors: &[MetricVector<S>]) -> Vec<[f64; 8]> {
    let mut out = vec![[0.0; 8]; vectors.len()];
    for m in Metric::ALL {
        let j = m.index();
        let col: Vec<f64> = vectors.iter().map(|v| v.values[j].as_f64()).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (row, &x) in out.iter_mut().zip(&col) {
            row[j] = if hi > lo {
                let n = (x - lo) / (hi - lo);
                if m.higher_is_better() { n } else { 1.0 - n }
            } else {
                0.5
            };
        }
        if !(hi > lo) && vectors.len() > 1 {
            log::debug!("{} is constant across {} rows; contributing 0.5", m.name(), vectors.len());
        }
    }
    out
}

/// Sum of the eight normalized, positive-trend metrics per candidate.
pub fn normalize_aggregate<S: Scalar>(vectors: &[MetricVector<S>]) -> Result<Vec<S>> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(format!("aggregation needs at least 2 candidates, got {}", vectors.len())));
    }
    if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("candidate {i} has non-finite metrics")));
    }
    Ok(normalized_table(vectors).into_iter().map(|row| S::lit(row.iter().sum())).collect())
}

/// `(argmax, argmin)` of the scores, ties to the lowest index.
/// All-equal scores yield [`Error::NoPreference`].
pub fn select_best_worst<S: Scalar>(scores: &[S]) -> Result<(usize, usize)> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!("selection needs at least 2 candidates, got {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite candidate score".into()));
    }
    let (mut best, mut worst) = (0, 0);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    if scores[best] == scores[worst] {
        return Err(Error::NoPreference(scores.len()));
    }
    Ok((best, worst))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationFlag {
    pub candidate: usize,
    pub caption: String,
    pub similarity: f64,
}

/// Flags candidates whose caption similarity to the ground-truth caption is
/// below `tau`; their captions become negative prompts.
pub fn detect_hallucination<S: Scalar>(
    captioner: &dyn Captioner<S>,
    gt_crop: &RasterImage<S>,
    candidate_crops: &[RasterImage<S>],
    tau: f64,
) -> Result<Vec<HallucinationFlag>> {
    if let Some(i) = candidate_crops.iter().position(|c| c.dims() != gt_crop.dims()) {
        return Err(Error::ShapeMismatch(format!("candidate crop {i} is {:?}, gt crop {:?}", candidate_crops[i].dims(), gt_crop.dims())));
    }
    let reference = captioner.caption(gt_crop)?;
    let mut flags = Vec::new();
    for (i, crop) in candidate_crops.iter().enumerate() {
        let caption = captioner.caption(crop)?;
        let similarity = captioner.similarity(&reference, &caption);
        if similarity < tau {
            flags.push(HallucinationFlag { candidate: i, caption, similarity });
        }
    }
    Ok(flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordSource {
    Auto,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsPair {
    pub winner: String,
    pub loser: String,
}

/// One instance-level preference: whole winner/loser images plus the
/// instance mask they were judged on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub lq_id: String,
    pub instance_id: usize,
    /// Label-map PNG; the instance is the pixels labelled `instance_id`.
    pub mask_path: String,
    pub winner_path: String,
    pub loser_path: String,
    pub weight: f64,
    pub source: RecordSource,
    pub negative_prompt: Option<String>,
    pub settings: SettingsPair,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::InvalidArgument(r));
        if self.lq_id.is_empty() {
            return bad("empty lq_id".into());
        }
        if self.winner_path == self.loser_path || self.settings.winner == self.settings.loser {
            return bad(format!("{}#{}: winner equals loser", self.lq_id, self.instance_id));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return bad(format!("{}#{}: weight {} outside [0, 1]", self.lq_id, self.instance_id, self.weight));
        }
        if self.negative_prompt.as_deref().is_some_and(|p| p.trim().is_empty()) {
            return bad(format!("{}#{}: empty negative prompt (use null)", self.lq_id, self.instance_id));
        }
        Ok(())
    }
}

/// Joins distinct flagged captions with `"; "`, or `None` when nothing was flagged.
pub fn negative_prompt_from<'a>(captions: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut seen = Vec::<&str>::new();
    for c in captions {
        let c = c.trim();
        if !c.is_empty() && !seen.contains(&c) {
            seen.push(c);
        }
    }
    (!seen.is_empty()).then(|| seen.join("; "))
}

/// Per-instance inputs to record assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutcome<S> {
    pub instance_id: usize,
    /// Aggregate score per candidate.
    pub scores: Vec<S>,
    pub weight: S,
    pub flags: Vec<HallucinationFlag>,
}

/// Where the artifacts of one LQ image live.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordContext<'a> {
    pub lq_id: &'a str,
    pub mask_path: &'a str,
    pub candidate_paths: &'a [String],
    pub candidate_labels: &'a [String],
}

/// One record per instance with a strict preference; tied instances are
/// skipped.
pub fn build_records<S: Scalar>(ctx: &RecordContext<'_>, outcomes: &[InstanceOutcome<S>]) -> Result<Vec<PreferenceRecord>> {
    if ctx.candidate_paths.len() != ctx.candidate_labels.len() {
        return Err(Error::InvalidArgument("candidate paths and labels differ in length".into()));
    }
    let mut records = Vec::new();
    for o in outcomes {
        if o.scores.len() != ctx.candidate_paths.len() {
            return Err(Error::InvalidArgument(format!("instance {}: {} scores for {} candidates", o.instance_id, o.scores.len(), ctx.candidate_paths.len())));
        }
        let (w, l) = match select_best_worst(&o.scores) {
            Ok(pair) => pair,
            Err(Error::NoPreference(_)) => {
                log::info!("{}#{}: all candidates tied, skipping", ctx.lq_id, o.instance_id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let record = PreferenceRecord {
            lq_id: ctx.lq_id.to_string(),
            instance_id: o.instance_id,
            mask_path: ctx.mask_path.to_string(),
            winner_path: ctx.candidate_paths[w].clone(),
            loser_path: ctx.candidate_paths[l].clone(),
            weight: o.weight.as_f64(),
            source: RecordSource::Auto,
            negative_prompt: negative_prompt_from(o.flags.iter().map(|f| f.caption.as_str())),
            settings: SettingsPair { winner: ctx.candidate_labels[w].clone(), loser: ctx.candidate_labels[l].clone() },
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Scores, selects and caption-checks every instance of one LQ image.
pub struct AutoAnnotator<'a, S: Scalar> {
    pub suite: &'a dyn MetricSuite<S>,
    pub captioner: &'a dyn Captioner<S>,
    pub tau: f64,
}

impl<S: Scalar> AutoAnnotator<'_, S> {
    pub fn outcomes(
        &self,
        cands: &CandidateSet<S>,
        gt: &RasterImage<S>,
        partition: &InstancePartition,
        weights: &InstanceWeightVector<S>,
    ) -> Result<Vec<InstanceOutcome<S>>> {
        if weights.weights.len() != partition.num_instances() {
            return Err(Error::InvalidArgument(format!("{} weights for {} instances", weights.weights.len(), partition.num_instances())));
        }
        let scores = score_instances(cands, gt, partition, self.suite)?;
        let mut out = Vec::with_capacity(scores.len());
        for (m, vectors) in scores.iter().enumerate() {
            let gt_crop = instance_crop(gt, partition, m)?;
            let crops = cands.candidates.iter().map(|c| instance_crop(&c.image, partition, m)).collect::<Result<Vec<_>>>()?;
            out.push(InstanceOutcome {
                instance_id: m,
                scores: normalize_aggregate(vectors)?,
                weight: weights.weights[m],
                flags: detect_hallucination(self.captioner, &gt_crop, &crops, self.tau)?,
            });
        }
        Ok(out)
    }
}

/// Validates and writes records as JSONL (an empty list gives an empty file).
pub fn export_jsonl(records: &[PreferenceRecord], path: &Path) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    write_jsonl(path, records)
}

/// Reads and validates records; errors name the offending line.
pub fn import_jsonl(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let records: Vec<PreferenceRecord> = read_jsonl(path)?;
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { context: format!("reading {}", path.display()), source })?;
    let lines: Vec<usize> = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, _)| i + 1).collect();
    for (r, line) in records.iter().zip(lines) {
        r.validate().map_err(|e| Error::Malformed { path: path.to_path_buf(), line, reason: e.to_string() })?;
    }
    Ok(records)
}
