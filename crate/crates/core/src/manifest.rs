//! Run manifests: resolved configuration, seeds and output checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SimError};
use crate::rng::{derive_seed, labels};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Incomplete,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Dialect of `config`'s source file.
    pub config_format: String,
    pub status: Status,
    /// Preset name, or `run` for a plain run.
    pub experiment: String,
    pub config: serde_json::Value,
    pub master_seed: u64,
    /// Seeds of the named random streams. Selection and mini-batch streams
    /// follow the same derivation with labels `selection_<age>_<round>` and
    /// `batches_<age>_<round>_<client>`.
    pub stream_seeds: BTreeMap<String, u64>,
    pub wallclock_ms: u64,
    /// File name (relative to the run directory) to SHA-256 hex digest.
    pub checksums: BTreeMap<String, String>,
}

/// Seeds for the data, center, strata, split, partition, per-mode init and per-age schedule streams.
pub fn stream_seed_table(master: u64, k: usize, ages: usize) -> BTreeMap<String, u64> {
    let mut names: Vec<String> = [labels::DATA, labels::CENTERS, labels::STRATA, labels::SPLIT, labels::PARTITION]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..k).map(labels::init));
    names.extend((0..ages).map(labels::schedule));
    names.into_iter().map(|n| {
        let seed = derive_seed(master, &n);
        (n, seed)
    }).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| SimError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes the manifest as incomplete on creation and again, with checksums,
/// on [`ManifestWriter::finish`].
pub struct ManifestWriter {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl ManifestWriter {
    pub fn begin(
        dir: &Path,
        experiment: &str,
        config: serde_json::Value,
        master_seed: u64,
        stream_seeds: BTreeMap<String, u64>,
    ) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
        let w = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                tool: "simfed".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config_format: "toml".into(),
                status: Status::Incomplete,
                experiment: experiment.into(),
                config,
                master_seed,
                stream_seeds,
                wallclock_ms: 0,
                checksums: BTreeMap::new(),
            },
            started: Instant::now(),
        };
        w.write()?;
        Ok(w)
    }

    fn write(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| SimError::io(&path, e))
    }

    /// Records checksums of `outputs` (relative to the run directory) and marks the run complete.
    pub fn finish(mut self, outputs: &[&str]) -> Result<RunManifest> {
        for name in outputs {
            let digest = sha256_file(&self.dir.join(name))?;
            self.manifest.checksums.insert(name.to_string(), digest);
        }
        self.manifest.wallclock_ms = self.started.elapsed().as_millis() as u64;
        self.manifest.status = Status::Complete;
        self.write()?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| SimError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| SimError::Parse {
        path,
        message: e.to_string(),
    })
}

/// Recomputes every recorded checksum; returns the names that differ.
pub fn verify_checksums(dir: &Path) -> Result<Vec<String>> {
    let m = read_manifest(dir)?;
    let mut bad = Vec::new();
    for (name, digest) in &m.checksums {
        if &sha256_file(&dir.join(name))? != digest {
            bad.push(name.clone());
        }
    }
    Ok(bad)
}
