//! Stage directories, atomic writes and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `seed + first 8 bytes of sha256(stage)`, wrapping.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(stage.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    seed.wrapping_add(u64::from_le_bytes(head))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub stage_seed: u64,
    pub limit_n: Option<usize>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// One stage's view of the artifact tree. Every file read or written goes
/// through here so the manifest lists it with its hash.
pub struct StageRun {
    out: PathBuf,
    dir: PathBuf,
    manifest: Manifest,
}

impl StageRun {
    pub fn new(out: &Path, stage: &str, config_hash: String, seed: u64, limit_n: Option<usize>) -> Result<Self> {
        let dir = out.join(stage);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(StageRun {
            out: out.to_path_buf(),
            dir,
            manifest: Manifest {
                stage: stage.to_string(),
                config_hash,
                seed,
                stage_seed: stage_seed(seed, stage),
                limit_n,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        })
    }

    pub fn seed(&self) -> u64 {
        self.manifest.stage_seed
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.out).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    /// Reads a file and records its hash.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("missing input {}", path.display()))?;
        let key = self.key(path);
        self.manifest.inputs.insert(key, sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    /// Path of an artifact written by an earlier stage.
    pub fn upstream(&self, stage: &str, file: &str) -> PathBuf {
        self.out.join(stage).join(file)
    }

    /// Like [`StageRun::upstream`] but fails with a "missing checkpoint"
    /// error naming the stage to run first.
    pub fn require_checkpoint(&self, stage: &str, file: &str) -> Result<PathBuf> {
        let path = self.upstream(stage, file);
        if !path.is_file() {
            bail!("missing checkpoint: {} (run `{stage}` first)", path.display());
        }
        Ok(path)
    }

    pub fn write(&mut self, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(file);
        write_atomic(&path, bytes)?;
        let key = self.key(&path);
        self.manifest.outputs.insert(key, sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(file, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, file: &str, rows: &[T]) -> Result<PathBuf> {
        let mut buf = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut buf, row)?;
            buf.push(b'\n');
        }
        self.write(file, &buf)
    }

    /// Writes the manifest and clears any error record from an earlier
    /// failed run.
    pub fn finish(self) -> Result<Manifest> {
        let _ = fs::remove_file(self.dir.join("error.json"));
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&self.dir.join("manifest.json"), text.as_bytes())?;
        Ok(self.manifest)
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{what}: line {}", i + 1)))
        .collect()
}
