//! Append-only JSONL persistence for tasks, submissions, pairwise trials
//! and pairwise choices. All state is replayed from the logs on open.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dspo_core::degrade::read_jsonl;
use dspo_core::eval::{PairwiseChoice, Verdict};
use dspo_core::preference::{negative_prompt_from, PreferenceRecord, RecordSource, SettingsPair};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, AnnotationError, Result};

pub const TASKS_LOG: &str = "tasks.jsonl";
pub const SUBMISSIONS_LOG: &str = "submissions.jsonl";
pub const TRIALS_LOG: &str = "pairwise_trials.jsonl";
pub const CHOICES_LOG: &str = "pairwise_choices.jsonl";
/// Directory under the data dir whose files are served at `/files/`.
pub const FILES_DIR: &str = "files";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateCrop {
    pub label: String,
    /// Crop image, relative to the files directory.
    pub image: String,
    pub caption: String,
    /// Whole SR image the crop came from (becomes winner/loser path).
    pub full_image: String,
}

/// Task content before an id is assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub lq_id: String,
    pub instance_id: usize,
    /// LQ context crop, relative to the files directory.
    pub lq_crop: String,
    /// Whether a ground-truth reference crop is shown.
    pub gt_reference: Option<String>,
    pub candidates: Vec<CandidateCrop>,
    pub mask_path: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Open,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    #[serde(flatten)]
    pub spec: TaskSpec,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSubmission {
    pub task_id: String,
    pub annotator_id: String,
    pub winner_label: String,
    pub loser_label: String,
    #[serde(default)]
    pub flagged_caption_labels: Vec<String>,
    #[serde(default)]
    pub round: usize,
    /// Milliseconds since the Unix epoch; filled in by the store when absent.
    #[serde(default)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub ok: bool,
    /// An earlier answer for the same (task, annotator, round) was replaced.
    pub replaced: bool,
}

/// One A/B comparison for human win-rate evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseTrial {
    pub trial_id: String,
    pub lq_image: String,
    /// Output of method A (the method whose win rate is measured).
    pub image_a: String,
    pub image_b: String,
}

/// A pairwise answer; `choice` is already mapped back from screen side to
/// method (`a`, `b` or `tie`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseChoiceRequest {
    pub annotator_id: String,
    #[serde(default)]
    pub round: usize,
    pub choice: Verdict,
    /// Which method was shown on the left (`a` or `b`), for auditing.
    #[serde(default)]
    pub left: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ChoiceLine {
    trial_id: String,
    #[serde(flatten)]
    request: PairwiseChoiceRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StoreConfig {
    /// Distinct annotators after which a task is `done`; `None` keeps tasks
    /// open for every annotator.
    pub votes_per_task: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub tasks: usize,
    pub open: usize,
    pub done: usize,
    pub submissions: usize,
    pub annotators: usize,
    pub submissions_per_round: BTreeMap<usize, usize>,
    pub trials: usize,
    pub choices: usize,
}

#[derive(Debug)]
pub struct AnnotationStore {
    dir: PathBuf,
    config: StoreConfig,
    specs: Vec<(String, TaskSpec)>,
    /// Latest answer per (task, annotator, round).
    answers: BTreeMap<(String, String, usize), AnnotationSubmission>,
    trials: Vec<PairwiseTrial>,
    choices: BTreeMap<(String, String, usize), PairwiseChoiceRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskLine {
    task_id: String,
    #[serde(flatten)]
    spec: TaskSpec,
}

fn read_log<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_jsonl(path)?)
}

/// Appends one JSON line with a single write and flushes it to disk.
fn append_line<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut line = serde_json::to_vec(item)?;
    line.push(b'\n');
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(format!("opening {}", path.display())))?;
    f.write_all(&line).map_err(io_err(format!("appending to {}", path.display())))?;
    f.sync_data().map_err(io_err(format!("syncing {}", path.display())))
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl AnnotationStore {
    /// Opens (creating if needed) a store rooted at `dir` and replays its logs.
    pub fn open(dir: &Path, config: StoreConfig) -> Result<Self> {
        std::fs::create_dir_all(dir.join(FILES_DIR)).map_err(io_err(format!("creating {}", dir.display())))?;
        let specs = read_log::<TaskLine>(&dir.join(TASKS_LOG))?.into_iter().map(|l| (l.task_id, l.spec)).collect();
        let mut answers = BTreeMap::new();
        for s in read_log::<AnnotationSubmission>(&dir.join(SUBMISSIONS_LOG))? {
            answers.insert((s.task_id.clone(), s.annotator_id.clone(), s.round), s);
        }
        let trials = read_log(&dir.join(TRIALS_LOG))?;
        let mut choices = BTreeMap::new();
        for c in read_log::<ChoiceLine>(&dir.join(CHOICES_LOG))? {
            choices.insert((c.trial_id, c.request.annotator_id.clone(), c.request.round), c.request);
        }
        Ok(Self { dir: dir.to_path_buf(), config, specs, answers, trials, choices })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files_dir(&self) -> PathBuf {
        self.dir.join(FILES_DIR)
    }

    fn check_file(&self, rel: &str) -> Result<()> {
        let path = self.files_dir().join(rel);
        if rel.is_empty() || !path.is_file() {
            return Err(AnnotationError::MissingFile(path));
        }
        Ok(())
    }

    /// Persists new open tasks; every referenced crop must exist under the
    /// files directory. Ids are sequential, so identical content yields
    /// distinct tasks.
    pub fn create_tasks(&mut self, specs: Vec<TaskSpec>) -> Result<Vec<String>> {
        for spec in &specs {
            if spec.candidates.len() < 2 {
                return Err(AnnotationError::Invalid(format!("{}#{}: need at least 2 candidates", spec.lq_id, spec.instance_id)));
            }
            let labels: BTreeSet<&str> = spec.candidates.iter().map(|c| c.label.as_str()).collect();
            if labels.len() != spec.candidates.len() {
                return Err(AnnotationError::Invalid(format!("{}#{}: duplicate candidate labels", spec.lq_id, spec.instance_id)));
            }
            if !(0.0..=1.0).contains(&spec.weight) {
                return Err(AnnotationError::Invalid(format!("{}#{}: weight {} outside [0, 1]", spec.lq_id, spec.instance_id, spec.weight)));
            }
            self.check_file(&spec.lq_crop)?;
            if let Some(gt) = &spec.gt_reference {
                self.check_file(gt)?;
            }
            for c in &spec.candidates {
                self.check_file(&c.image)?;
            }
        }
        let mut ids = Vec::with_capacity(specs.len());
        for spec in specs {
            let task_id = format!("t{:06}", self.specs.len() + 1);
            append_line(&self.dir.join(TASKS_LOG), &TaskLine { task_id: task_id.clone(), spec: spec.clone() })?;
            self.specs.push((task_id.clone(), spec));
            ids.push(task_id);
        }
        Ok(ids)
    }

    fn annotators_of(&self, task_id: &str) -> BTreeSet<&str> {
        self.answers.keys().filter(|(t, _, _)| t == task_id).map(|(_, a, _)| a.as_str()).collect()
    }

    fn status(&self, task_id: &str) -> TaskStatus {
        match self.config.votes_per_task {
            Some(n) if self.annotators_of(task_id).len() >= n => TaskStatus::Done,
            _ => TaskStatus::Open,
        }
    }

    pub fn task(&self, task_id: &str) -> Option<AnnotationTask> {
        self.specs
            .iter()
            .find(|(id, _)| id == task_id)
            .map(|(id, spec)| AnnotationTask { task_id: id.clone(), spec: spec.clone(), status: self.status(id) })
    }

    pub fn tasks(&self) -> Vec<AnnotationTask> {
        self.specs.iter().map(|(id, spec)| AnnotationTask { task_id: id.clone(), spec: spec.clone(), status: self.status(id) }).collect()
    }

    /// The first open task (in creation order) that `annotator` has not
    /// answered in `round`.
    pub fn next_task(&self, annotator: &str, round: usize) -> Option<AnnotationTask> {
        self.specs
            .iter()
            .find(|(id, _)| {
                self.status(id) == TaskStatus::Open && !self.answers.contains_key(&(id.clone(), annotator.to_string(), round))
            })
            .and_then(|(id, _)| self.task(id))
    }

    fn validate(&self, sub: &AnnotationSubmission) -> Result<()> {
        let (_, spec) = self.specs.iter().find(|(id, _)| *id == sub.task_id).ok_or_else(|| AnnotationError::UnknownTask(sub.task_id.clone()))?;
        let labels: BTreeSet<&str> = spec.candidates.iter().map(|c| c.label.as_str()).collect();
        if sub.annotator_id.trim().is_empty() {
            return Err(AnnotationError::Invalid("annotator_id must not be empty".into()));
        }
        if sub.winner_label == sub.loser_label {
            return Err(AnnotationError::Invalid(format!("winner and loser are both `{}`", sub.winner_label)));
        }
        for l in [&sub.winner_label, &sub.loser_label].into_iter().chain(&sub.flagged_caption_labels) {
            if !labels.contains(l.as_str()) {
                return Err(AnnotationError::Invalid(format!("label `{l}` is not a candidate of task {}", sub.task_id)));
            }
        }
        Ok(())
    }

    /// Validates and durably appends a submission. A later answer for the
    /// same (task, annotator, round) replaces the earlier one.
    pub fn submit(&mut self, mut sub: AnnotationSubmission) -> Result<SubmitAck> {
        self.validate(&sub)?;
        sub.timestamp.get_or_insert_with(now_millis);
        append_line(&self.dir.join(SUBMISSIONS_LOG), &sub)?;
        let replaced = self.answers.insert((sub.task_id.clone(), sub.annotator_id.clone(), sub.round), sub).is_some();
        Ok(SubmitAck { ok: true, replaced })
    }

    pub fn submissions(&self) -> Vec<AnnotationSubmission> {
        self.answers.values().cloned().collect()
    }

    /// Human records by majority vote; see [`export_records`].
    pub fn export_human_records(&self) -> Vec<PreferenceRecord> {
        let tasks = self.tasks();
        let records = export_records(&tasks, &self.submissions());
        if self.answers.is_empty() {
            log::warn!("no submissions yet; exporting an empty record set");
        }
        records
    }

    pub fn add_trials(&mut self, trials: Vec<PairwiseTrial>) -> Result<()> {
        for t in &trials {
            if self.trials.iter().any(|x| x.trial_id == t.trial_id) {
                return Err(AnnotationError::Invalid(format!("trial `{}` already exists", t.trial_id)));
            }
            for f in [&t.lq_image, &t.image_a, &t.image_b] {
                self.check_file(f)?;
            }
        }
        for t in trials {
            append_line(&self.dir.join(TRIALS_LOG), &t)?;
            self.trials.push(t);
        }
        Ok(())
    }

    pub fn next_trial(&self, annotator: &str, round: usize) -> Option<PairwiseTrial> {
        self.trials.iter().find(|t| !self.choices.contains_key(&(t.trial_id.clone(), annotator.to_string(), round))).cloned()
    }

    pub fn record_choice(&mut self, trial_id: &str, req: PairwiseChoiceRequest) -> Result<SubmitAck> {
        if !self.trials.iter().any(|t| t.trial_id == trial_id) {
            return Err(AnnotationError::UnknownTrial(trial_id.to_string()));
        }
        if req.annotator_id.trim().is_empty() {
            return Err(AnnotationError::Invalid("annotator_id must not be empty".into()));
        }
        if req.left == Some(Verdict::Tie) {
            return Err(AnnotationError::Invalid("left side must be `a` or `b`".into()));
        }
        append_line(&self.dir.join(CHOICES_LOG), &ChoiceLine { trial_id: trial_id.to_string(), request: req.clone() })?;
        let replaced = self.choices.insert((trial_id.to_string(), req.annotator_id.clone(), req.round), req).is_some();
        Ok(SubmitAck { ok: true, replaced })
    }

    pub fn pairwise_choices(&self) -> Vec<PairwiseChoice> {
        self.choices
            .iter()
            .map(|((trial, annotator, round), req)| PairwiseChoice { trial_id: trial.clone(), annotator_id: annotator.clone(), round: *round, choice: req.choice })
            .collect()
    }

    pub fn stats(&self) -> StoreStats {
        let tasks = self.tasks();
        let done = tasks.iter().filter(|t| t.status == TaskStatus::Done).count();
        let mut per_round = BTreeMap::new();
        for (_, _, r) in self.answers.keys() {
            *per_round.entry(*r).or_default() += 1;
        }
        StoreStats {
            tasks: tasks.len(),
            open: tasks.len() - done,
            done,
            submissions: self.answers.len(),
            annotators: self.answers.keys().map(|(_, a, _)| a).collect::<BTreeSet<_>>().len(),
            submissions_per_round: per_round,
            trials: self.trials.len(),
            choices: self.choices.len(),
        }
    }
}

/// The unique most frequent label, or `None` on a tie for first place.
fn majority<'a>(votes: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    let mut counts = BTreeMap::<&str, usize>::new();
    for v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let mut leaders = counts.into_iter().filter(|(_, n)| *n == top);
    let (label, _) = leaders.next()?;
    leaders.next().is_none().then_some(label)
}

/// Per task: majority winner and loser over every (annotator, round)
/// answer, skipping ties; captions flagged by a strict majority of answers
/// become the negative prompt. Pure function of its inputs.
pub fn export_records(tasks: &[AnnotationTask], submissions: &[AnnotationSubmission]) -> Vec<PreferenceRecord> {
    let mut out = Vec::new();
    for task in tasks {
        let subs: Vec<&AnnotationSubmission> = submissions.iter().filter(|s| s.task_id == task.task_id).collect();
        if subs.is_empty() {
            continue;
        }
        let (Some(winner), Some(loser)) = (majority(subs.iter().map(|s| s.winner_label.as_str())), majority(subs.iter().map(|s| s.loser_label.as_str())))
        else {
            log::info!("task {}: no majority, skipped", task.task_id);
            continue;
        };
        if winner == loser {
            log::info!("task {}: majority winner equals majority loser, skipped", task.task_id);
            continue;
        }
        let by_label = |l: &str| task.spec.candidates.iter().find(|c| c.label == l).expect("labels validated on submit");
        let flagged = task.spec.candidates.iter().filter(|c| {
            let n = subs.iter().filter(|s| s.flagged_caption_labels.contains(&c.label)).count();
            2 * n > subs.len()
        });
        out.push(PreferenceRecord {
            lq_id: task.spec.lq_id.clone(),
            instance_id: task.spec.instance_id,
            mask_path: task.spec.mask_path.clone(),
            winner_path: by_label(winner).full_image.clone(),
            loser_path: by_label(loser).full_image.clone(),
            weight: task.spec.weight,
            source: RecordSource::Human,
            negative_prompt: negative_prompt_from(flagged.map(|c| c.caption.as_str())),
            settings: SettingsPair { winner: winner.to_string(), loser: loser.to_string() },
        });
    }
    out
}
