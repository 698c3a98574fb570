//! Run manifests, artifact checksums, and staging of outputs so that a
//! failed run never leaves half-written files among finished ones.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const QUARANTINE_DIR: &str = "quarantine";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config_path: Option<PathBuf>,
    /// Fully resolved configuration, every default materialized.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub output_dir: PathBuf,
    pub status: RunStatus,
    pub error: Option<String>,
    /// SHA-256 of every artifact, keyed by path relative to `output_dir`.
    pub artifacts: BTreeMap<String, String>,
    /// SHA-256 of files the run read but did not produce.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Checksums of the given files, keyed by their path under `root`.
pub fn checksums(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
            Ok((rel, sha256_file(f)?))
        })
        .collect()
}

/// Every regular file below `dir`, sorted.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().expect("file path").to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_atomic(path, body.as_bytes())
    }
}

/// Private scratch directory inside an output directory. Artifacts are
/// written here and only moved into place once the run has succeeded.
pub struct Staging {
    pub output_dir: PathBuf,
    pub dir: PathBuf,
}

impl Staging {
    pub fn new(output_dir: &Path) -> Result<Self> {
        fs::create_dir_all(output_dir).with_context(|| format!("creating {}", output_dir.display()))?;
        let dir = output_dir.join(format!(".staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self {
            output_dir: output_dir.to_path_buf(),
            dir,
        })
    }

    /// Moves every staged file into the output directory and returns the
    /// final paths.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut placed = Vec::new();
        for f in files_under(&self.dir)? {
            let rel = f.strip_prefix(&self.dir).expect("staged file under staging dir");
            let dest = self.output_dir.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(&f, &dest).with_context(|| format!("moving {} into place", dest.display()))?;
            placed.push(dest);
        }
        fs::remove_dir_all(&self.dir)?;
        Ok(placed)
    }

    /// Moves the staged files to `quarantine/<label>/` and returns that
    /// directory.
    pub fn quarantine(self, label: &str) -> Result<PathBuf> {
        let dest = quarantine_dir(&self.output_dir, label);
        fs::create_dir_all(dest.parent().expect("quarantine has a parent"))?;
        fs::rename(&self.dir, &dest)?;
        Ok(dest)
    }
}

pub fn quarantine_dir(output_dir: &Path, label: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    output_dir.join(QUARANTINE_DIR).join(format!("{label}-{stamp}"))
}
