use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use fs2::FileExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed { stage: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: rayon::current_num_threads(),
        }
    }
}

/// Everything needed to redo a run: the resolved config, the command line,
/// seeds and input checksums. Timings are informational.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub module_versions: BTreeMap<String, String>,
    /// Input path to content checksum.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub cache_hits: Vec<String>,
    /// Stage name to wall-clock seconds.
    pub timings_s: BTreeMap<String, f64>,
    /// Extra facts worth keeping, e.g. the filter kernel.
    pub details: BTreeMap<String, serde_json::Value>,
    pub environment: Environment,
    pub started_unix_s: f64,
    pub finished_unix_s: Option<f64>,
    pub status: RunStatus,
}

pub fn module_versions() -> BTreeMap<String, String> {
    let v = env!("CARGO_PKG_VERSION").to_string();
    let mut m: BTreeMap<String, String> = ["eeg_io", "preprocess", "models", "training", "evaluate", "synthdata", "cli"]
        .iter()
        .map(|k| (k.to_string(), v.clone()))
        .collect();
    m.insert("store_format".into(), crate::eeg_io::STORE_VERSION.to_string());
    m.insert("checkpoint_format".into(), crate::models::CHECKPOINT_VERSION.to_string());
    m
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: serde_json::Value, config_hash: String) -> Self {
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            command: command.into(),
            args,
            config_hash,
            config,
            seeds: BTreeMap::new(),
            module_versions: module_versions(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            cache_hits: Vec::new(),
            timings_s: BTreeMap::new(),
            details: BTreeMap::new(),
            environment: Environment::current(),
            started_unix_s: unix_now(),
            finished_unix_s: None,
            status: RunStatus::Running,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }

    pub fn finish(&mut self, status: RunStatus) {
        self.finished_unix_s = Some(unix_now());
        self.status = status;
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let t = Instant::now();
        let out = f(self);
        *self.timings_s.entry(stage.to_string()).or_default() += t.elapsed().as_secs_f64();
        out
    }
}

/// Exclusive lock on an output directory, released on drop.
pub struct DirLock {
    file: fs::File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.try_lock_exclusive()
            .map_err(|_| Error::Invalid(format!("{} is locked by another run", dir.display())))?;
        Ok(DirLock { file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = FileExt::unlock(&self.file);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("synth", vec!["--seed".into(), "7".into()], serde_json::json!({"a": 1}), "abc".into());
        m.seeds.insert("seed".into(), 7);
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
        m.time("stage", |_| ());
        m.finish(RunStatus::Complete);
        m.write(dir.path()).unwrap();
        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back.status, RunStatus::Complete);
        assert!(back.finished_unix_s.unwrap() >= back.started_unix_s);
        assert!(back.timings_s.contains_key("stage"));
    }

    #[test]
    fn second_lock_on_same_dir_fails() {
        let dir = tempfile::tempdir().unwrap();
        let first = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(first);
        DirLock::acquire(dir.path()).unwrap();
    }
}
