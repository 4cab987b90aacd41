//! Run directories, stage manifests and the run lock.
//!
//! A run lives at `<root>/<name>/`; each stage writes into its own
//! subdirectory and finishes by writing `manifest.json` there. The manifest
//! fingerprints the stage's configuration and the manifests of its upstream
//! stages, and lists the hash of every file the stage produced. A stage whose
//! fingerprint matches and whose outputs are intact is skipped without
//! touching the file system.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dspo_core::degrade::{file_hash, write_atomic};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
/// Default run root when neither `--run-dir` nor `DSPO_RUN_DIR` is given.
pub const DEFAULT_ROOT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stage: String,
    pub fingerprint: String,
    /// The configuration the stage ran with.
    pub config: serde_json::Value,
    /// Upstream stage name → hash of its manifest.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the stage directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Completed,
    /// Inputs, configuration and outputs were unchanged; nothing was written.
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

/// Removes the lock file when dropped.
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        if let Err(e) = std::fs::remove_file(&self.0) {
            log::warn!("could not remove lock {}: {e}", self.0.display());
        }
    }
}

fn hash_bytes(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn list_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(io_err(format!("listing {}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(io_err(format!("listing {}", dir.display())))?.path();
        if path.is_dir() {
            list_files(&path, base, out)?;
        } else if path.strip_prefix(base).map(|p| p != Path::new(MANIFEST)).unwrap_or(true) {
            out.push(path);
        }
    }
    Ok(())
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `<run_root>/<name>`.
    pub fn named(run_root: &Path, name: &str) -> Self {
        Self::new(run_root.join(name))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.stage_dir(stage).join(MANIFEST)
    }

    /// Resolves a path recorded relative to the run root.
    pub fn resolve(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// Expresses `path` relative to the run root (unchanged if outside it).
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    pub fn read_manifest(&self, stage: &str) -> Result<StageManifest> {
        let path = self.manifest_path(stage);
        let bytes = std::fs::read(&path).map_err(|_| CliError::MissingUpstream { stage: stage.to_string(), path: path.clone() })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Hash of an upstream manifest, or the missing-artifact error naming it.
    pub fn upstream_hash(&self, stage: &str) -> Result<String> {
        let path = self.manifest_path(stage);
        if !path.is_file() {
            return Err(CliError::MissingUpstream { stage: stage.to_string(), path });
        }
        Ok(file_hash(&path)?)
    }

    fn outputs_intact(&self, stage: &str, manifest: &StageManifest) -> bool {
        let dir = self.stage_dir(stage);
        let mut files = Vec::new();
        if list_files(&dir, &dir, &mut files).is_err() || files.len() != manifest.outputs.len() {
            return false;
        }
        manifest.outputs.iter().all(|(rel, hash)| file_hash(&dir.join(rel)).map(|h| &h == hash).unwrap_or(false))
    }

    /// Runs `body` for `stage` unless an identical completed run exists.
    ///
    /// Order of checks: upstream manifests (missing → error naming the
    /// path), fingerprint and output hashes (match → no-op, no writes), then
    /// the lock file. The stage directory is cleared first when the stage
    /// previously completed with a different fingerprint, or when `force` is
    /// set; otherwise partial outputs of an interrupted run are kept so that
    /// training can resume from its checkpoints.
    pub fn run_stage<C: Serialize>(
        &self,
        stage: &str,
        config: &C,
        upstream: &[&str],
        force: bool,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<StageOutcome> {
        let mut inputs = BTreeMap::new();
        for up in upstream {
            inputs.insert(up.to_string(), self.upstream_hash(up)?);
        }
        let config = serde_json::to_value(config)?;
        let inputs_json = serde_json::to_vec(&inputs)?;
        let fingerprint = hash_bytes(&[stage.as_bytes(), &serde_json::to_vec(&config)?, &inputs_json]);
        let previous = self.read_manifest(stage).ok();
        if let Some(prev) = &previous {
            if !force && prev.fingerprint == fingerprint && self.outputs_intact(stage, prev) {
                log::info!("{stage}: up to date ({})", self.manifest_path(stage).display());
                return Ok(StageOutcome::UpToDate);
            }
        }

        std::fs::create_dir_all(&self.root).map_err(io_err(format!("creating {}", self.root.display())))?;
        let lock = self.root.join(LOCK_FILE);
        std::fs::OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => CliError::Locked(lock.clone()),
            _ => CliError::Io { context: format!("creating {}", lock.display()), source: e },
        })?;
        let _guard = LockGuard(lock);

        let dir = self.stage_dir(stage);
        if dir.exists() && (force || previous.as_ref().is_some_and(|p| p.fingerprint != fingerprint)) {
            std::fs::remove_dir_all(&dir).map_err(io_err(format!("clearing {}", dir.display())))?;
        }
        let manifest_path = self.manifest_path(stage);
        if manifest_path.exists() {
            std::fs::remove_file(&manifest_path).map_err(io_err(format!("removing {}", manifest_path.display())))?;
        }
        std::fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        log::info!("{stage}: running");
        body(&dir)?;

        let mut files = Vec::new();
        list_files(&dir, &dir, &mut files)?;
        let mut outputs = BTreeMap::new();
        for f in files {
            let rel = f.strip_prefix(&dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            outputs.insert(rel, file_hash(&f)?);
        }
        let manifest = StageManifest { stage: stage.to_string(), fingerprint, config, inputs, outputs };
        write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
        log::info!("{stage}: done ({} outputs)", manifest.outputs.len());
        Ok(StageOutcome::Completed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerun_is_a_no_op_and_config_change_reruns() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::new(tmp.path());
        let write = |dir: &Path| std::fs::write(dir.join("out.txt"), b"x").map_err(io_err("w"));
        assert_eq!(run.run_stage("a", &1, &[], false, write).unwrap(), StageOutcome::Completed);
        assert_eq!(run.run_stage("a", &1, &[], false, |_| panic!("must not run")).unwrap(), StageOutcome::UpToDate);
        assert_eq!(run.run_stage("a", &2, &[], false, write).unwrap(), StageOutcome::Completed);
        assert_eq!(run.run_stage("a", &2, &[], true, write).unwrap(), StageOutcome::Completed);
        // tampered output forces a rerun
        std::fs::write(run.stage_dir("a").join("out.txt"), b"y").unwrap();
        assert_eq!(run.run_stage("a", &2, &[], false, write).unwrap(), StageOutcome::Completed);
    }

    #[test]
    fn upstream_changes_invalidate_downstream() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::new(tmp.path());
        let ok = |_: &Path| Ok(());
        match run.run_stage("b", &0, &["a"], false, ok) {
            Err(CliError::MissingUpstream { path, .. }) => assert!(path.ends_with("a/manifest.json")),
            other => panic!("{other:?}"),
        }
        run.run_stage("a", &1, &[], false, ok).unwrap();
        run.run_stage("b", &0, &["a"], false, ok).unwrap();
        assert_eq!(run.run_stage("b", &0, &["a"], false, ok).unwrap(), StageOutcome::UpToDate);
        run.run_stage("a", &2, &[], false, ok).unwrap();
        assert_eq!(run.run_stage("b", &0, &["a"], false, ok).unwrap(), StageOutcome::Completed);
    }

    #[test]
    fn lock_blocks_concurrent_stages_and_is_released() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::new(tmp.path());
        std::fs::write(tmp.path().join(LOCK_FILE), b"").unwrap();
        assert!(matches!(run.run_stage("a", &1, &[], false, |_| Ok(())), Err(CliError::Locked(_))));
        std::fs::remove_file(tmp.path().join(LOCK_FILE)).unwrap();
        run.run_stage("a", &1, &[], false, |_| Err(CliError::Invalid("boom".into()))).unwrap_err();
        assert!(!tmp.path().join(LOCK_FILE).exists());
        assert!(!run.manifest_path("a").exists());
    }
}
