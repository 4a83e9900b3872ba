//! Stage bookkeeping: workdir lock, manifests and the content-hash cache.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Bumped when the layout of any stage's artifacts changes.
pub const ARTIFACT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".domainrank.lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Ingest,
    Sample,
    Prior,
    Degrade,
    Covariance,
    Mixture,
    Score,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Sample => "sample",
            Stage::Prior => "prior",
            Stage::Degrade => "degrade",
            Stage::Covariance => "covariance",
            Stage::Mixture => "mixture",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub artifact_version: u32,
    pub tool_version: String,
    /// Hash of the whole validated config.
    pub config_hash: String,
    pub seed: u64,
    /// Hash of everything this stage's outputs depend on.
    pub input_key: String,
    /// Upstream stage to the `outputs_digest` it was built from.
    pub upstream: BTreeMap<Stage, String>,
    /// Relative path to SHA-256 of every file the stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub outputs_digest: String,
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if path != root.join(MANIFEST) {
            out.push(path);
        }
    }
    Ok(())
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(dir, dir, &mut files)?;
    files
        .iter()
        .map(|f| Ok((relative(dir, f), hash_file(f)?)))
        .collect()
}

fn digest_of(outputs: &BTreeMap<String, String>) -> String {
    sha256_hex(&serde_json::to_vec(outputs).expect("string map serializes"))
}

/// Exclusive handle on a workdir; the lock file is removed on drop.
pub struct Workdir {
    root: PathBuf,
    lock: PathBuf,
}

impl Workdir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let lock = root.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked(lock)),
            Err(e) => return Err(CliError::io(&lock, e)),
        }
        Ok(Self {
            root: root.to_owned(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn manifest(&self, stage: Stage) -> Result<Option<Manifest>> {
        let path = self.stage_dir(stage).join(MANIFEST);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }

    /// Manifests of `deps`, erroring on the first one missing. A dependency
    /// built from a different upstream than the one now on disk is stale.
    pub fn require(&self, stage: Stage, deps: &[Stage]) -> Result<BTreeMap<Stage, Manifest>> {
        let mut found = BTreeMap::new();
        for &dep in deps {
            let manifest = self.manifest(dep)?.ok_or(CliError::MissingDependency { stage, missing: dep })?;
            for (&upstream, digest) in &manifest.upstream {
                let current = self.manifest(upstream)?;
                if current.map(|m| m.outputs_digest) != Some(digest.clone()) {
                    return Err(CliError::StaleDependency {
                        stage,
                        dependency: dep,
                        upstream,
                    });
                }
            }
            found.insert(dep, manifest);
        }
        Ok(found)
    }

    fn is_current(&self, stage: Stage, key: &str) -> Result<bool> {
        let Some(manifest) = self.manifest(stage)? else {
            return Ok(false);
        };
        if manifest.input_key != key || manifest.artifact_version != ARTIFACT_VERSION {
            return Ok(false);
        }
        match hash_outputs(&self.stage_dir(stage)) {
            Ok(outputs) => Ok(outputs == manifest.outputs),
            Err(_) => Ok(false),
        }
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Everything needed to decide whether a stage must run and to stamp its
/// manifest.
pub struct StageRun<'a> {
    pub workdir: &'a Workdir,
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub upstream: BTreeMap<Stage, Manifest>,
    /// Stage-relevant config and input digests, serialized.
    pub inputs: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

impl StageRun<'_> {
    fn input_key(&self) -> String {
        let upstream: BTreeMap<Stage, &str> = self
            .upstream
            .iter()
            .map(|(s, m)| (*s, m.outputs_digest.as_str()))
            .collect();
        let key = serde_json::json!({
            "stage": self.stage,
            "artifact_version": ARTIFACT_VERSION,
            "seed": self.seed,
            "upstream": upstream,
            "inputs": self.inputs,
        });
        sha256_hex(&serde_json::to_vec(&key).expect("json value serializes"))
    }

    /// Run `body` into a scratch directory and move it into place, unless
    /// the stage's current artifacts were built from the same inputs.
    pub fn execute(self, body: impl FnOnce(&Path) -> Result<()>) -> Result<Outcome> {
        let key = self.input_key();
        if self.workdir.is_current(self.stage, &key)? {
            log::info!("{}: up to date", self.stage);
            return Ok(Outcome::UpToDate);
        }
        let root = self.workdir.root();
        let scratch = root.join(format!(".{}.partial", self.stage));
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(|e| CliError::io(&scratch, e))?;
        }
        fs::create_dir_all(&scratch).map_err(|e| CliError::io(&scratch, e))?;
        let started = std::time::Instant::now();
        body(&scratch)?;

        let outputs = hash_outputs(&scratch)?;
        let manifest = Manifest {
            stage: self.stage,
            artifact_version: ARTIFACT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config_hash,
            seed: self.seed,
            input_key: key,
            upstream: self
                .upstream
                .iter()
                .map(|(s, m)| (*s, m.outputs_digest.clone()))
                .collect(),
            outputs_digest: digest_of(&outputs),
            outputs,
        };
        let manifest_path = scratch.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&manifest_path, text).map_err(|e| CliError::io(&manifest_path, e))?;

        let target = self.workdir.stage_dir(self.stage);
        if target.exists() {
            fs::remove_dir_all(&target).map_err(|e| CliError::io(&target, e))?;
        }
        fs::rename(&scratch, &target).map_err(|e| CliError::io(&target, e))?;
        log::info!(
            "{}: wrote {} artifacts in {:.1?}",
            self.stage,
            manifest.outputs.len(),
            started.elapsed()
        );
        Ok(Outcome::Ran)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run<'a>(wd: &'a Workdir, stage: Stage, value: u64) -> StageRun<'a> {
        StageRun {
            workdir: wd,
            stage,
            config_hash: "c".into(),
            seed: 0,
            upstream: BTreeMap::new(),
            inputs: serde_json::json!({ "value": value }),
        }
    }

    #[test]
    fn second_lock_is_refused_until_the_first_drops() {
        let dir = tempfile::tempdir().unwrap();
        let first = Workdir::open(dir.path()).unwrap();
        assert!(matches!(Workdir::open(dir.path()), Err(CliError::Locked(_))));
        drop(first);
        Workdir::open(dir.path()).unwrap();
    }

    #[test]
    fn unchanged_inputs_skip_and_changed_inputs_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::open(dir.path()).unwrap();
        let write = |d: &Path| fs::write(d.join("a.txt"), "x").map_err(|e| CliError::io(d, e));
        assert_eq!(run(&wd, Stage::Synth, 1).execute(write).unwrap(), Outcome::Ran);
        assert_eq!(run(&wd, Stage::Synth, 1).execute(write).unwrap(), Outcome::UpToDate);
        assert_eq!(run(&wd, Stage::Synth, 2).execute(write).unwrap(), Outcome::Ran);
        let m = wd.manifest(Stage::Synth).unwrap().unwrap();
        assert_eq!(m.outputs.keys().collect::<Vec<_>>(), ["a.txt"]);
    }

    #[test]
    fn tampered_outputs_force_a_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::open(dir.path()).unwrap();
        let write = |d: &Path| fs::write(d.join("a.txt"), "x").map_err(|e| CliError::io(d, e));
        run(&wd, Stage::Synth, 1).execute(write).unwrap();
        fs::write(wd.stage_dir(Stage::Synth).join("a.txt"), "y").unwrap();
        assert_eq!(run(&wd, Stage::Synth, 1).execute(write).unwrap(), Outcome::Ran);
    }

    #[test]
    fn missing_and_stale_dependencies_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::open(dir.path()).unwrap();
        match wd.require(Stage::Prior, &[Stage::Ingest, Stage::Sample]) {
            Err(CliError::MissingDependency { missing, .. }) => assert_eq!(missing, Stage::Ingest),
            other => panic!("{other:?}"),
        }
        let write = |d: &Path| fs::write(d.join("a.txt"), "x").map_err(|e| CliError::io(d, e));
        run(&wd, Stage::Ingest, 1).execute(write).unwrap();
        let mut sample = run(&wd, Stage::Sample, 1);
        sample.upstream = wd.require(Stage::Sample, &[Stage::Ingest]).unwrap();
        sample.execute(write).unwrap();
        wd.require(Stage::Prior, &[Stage::Ingest, Stage::Sample]).unwrap();

        let write_other = |d: &Path| fs::write(d.join("a.txt"), "z").map_err(|e| CliError::io(d, e));
        run(&wd, Stage::Ingest, 2).execute(write_other).unwrap();
        match wd.require(Stage::Prior, &[Stage::Ingest, Stage::Sample]) {
            Err(CliError::StaleDependency { dependency, upstream, .. }) => {
                assert_eq!((dependency, upstream), (Stage::Sample, Stage::Ingest))
            }
            other => panic!("{other:?}"),
        }
    }
}
