//! Run manifests and staged output directories.
//!
//! Every command writes into a hidden staging directory next to its output
//! and renames it into place only after all artifacts (and the manifest) are
//! on disk, so an interrupted or failed run never leaves a half-written
//! output directory behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ensdown::fsutil::{atomic_write, sha256_file};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Fully resolved settings (defaults, then config file, then flags).
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    /// Output artifacts by role, relative to the output directory.
    pub outputs: BTreeMap<String, String>,
    /// SHA-256 of every file in the output directory except run manifests.
    pub artifact_hashes: BTreeMap<String, String>,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            artifact_hashes: BTreeMap::new(),
            duration_seconds: 0.0,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    /// The resolved settings, typed.
    pub fn settings<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

/// Settings from a JSON config file, or defaults without one. A run manifest
/// is accepted too, in which case its resolved config is used.
pub fn load_settings<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("command") && obj.contains_key("config") {
            value = obj.remove("config").unwrap_or_default();
        }
    }
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

/// Every regular file below `root` except run manifests, as sorted
/// `/`-separated relative paths.
pub fn artifact_files(root: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let rel = path.strip_prefix(root).expect("below root");
                let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn hash_artifacts(root: &Path) -> Result<BTreeMap<String, String>> {
    artifact_files(root)?
        .into_iter()
        .map(|rel| {
            let hash = sha256_file(&root.join(&rel))?;
            Ok((rel, format!("sha256:{hash}")))
        })
        .collect()
}

/// An output directory under construction.
pub struct Staged {
    tmp: PathBuf,
    out: PathBuf,
    started: Instant,
    committed: bool,
}

impl Staged {
    pub fn new(out: &Path) -> Result<Self> {
        let name = out
            .file_name()
            .with_context(|| format!("output path {} has no directory name", out.display()))?
            .to_string_lossy()
            .into_owned();
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        if out.exists() {
            check_replaceable(out)?;
        }
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = parent.join(format!(".{name}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).with_context(|| format!("clearing stale {}", tmp.display()))?;
        }
        fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Staged {
            tmp,
            out: out.to_path_buf(),
            started: Instant::now(),
            committed: false,
        })
    }

    /// Where artifacts go until [`Staged::commit`].
    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Hashes the staged artifacts, writes the manifest and moves the
    /// directory into place, replacing an earlier run's output.
    pub fn commit(mut self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.artifact_hashes = hash_artifacts(&self.tmp)?;
        manifest.duration_seconds = self.started.elapsed().as_secs_f64();
        atomic_write(&self.tmp.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
        if self.out.exists() {
            check_replaceable(&self.out)?;
            fs::remove_dir_all(&self.out).with_context(|| format!("replacing {}", self.out.display()))?;
        }
        fs::rename(&self.tmp, &self.out)
            .with_context(|| format!("moving {} to {}", self.tmp.display(), self.out.display()))?;
        self.committed = true;
        Ok(manifest)
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Only empty directories and earlier run outputs may be overwritten.
fn check_replaceable(out: &Path) -> Result<()> {
    if !out.is_dir() {
        bail!("output {} exists and is not a directory", out.display());
    }
    let empty = fs::read_dir(out)?.next().is_none();
    if !empty && !out.join(MANIFEST_FILE).is_file() {
        bail!(
            "output directory {} is not empty and holds no {MANIFEST_FILE}; refusing to overwrite it",
            out.display()
        );
    }
    Ok(())
}
