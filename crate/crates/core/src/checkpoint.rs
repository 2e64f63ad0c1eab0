//! Checkpoints: a JSON manifest next to a little-endian `f64` blob.
//!
//! Parameters are stored in lexicographic name order; the manifest lists
//! each name and shape and the sha256 of the blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndcore::{Array, ParamStore};

pub const FORMAT: &str = "avatar-lcm-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub phase: String,
    pub iteration: u64,
    pub schedule: ScheduleInfo,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(blob)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(
        phase: &str,
        iteration: u64,
        schedule: ScheduleInfo,
        config: serde_json::Value,
        params: ParamStore,
    ) -> Self {
        let tensors = params
            .iter()
            .map(|(name, a)| TensorEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            phase: phase.into(),
            iteration,
            schedule,
            config,
            tensors,
            blob: String::new(),
            sha256: params.content_hash(),
        };
        Self { manifest, params }
    }

    /// Write `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
    pub fn save(&mut self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let blob = self.params.to_le_bytes();
        self.manifest.blob = format!("{stem}.bin");
        self.manifest.sha256 = sha256_hex(&blob);
        let manifest_path = dir.join(format!("{stem}.json"));
        std::fs::write(dir.join(&self.manifest.blob), &blob)?;
        std::fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&self.manifest)? + "\n",
        )?;
        Ok(manifest_path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        if !manifest_path.exists() {
            return Err(Error::MissingCheckpoint(
                manifest_path.display().to_string(),
            ));
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format {:?}",
                manifest.format
            )));
        }
        let bpath = blob_path(manifest_path, &manifest.blob);
        if !bpath.exists() {
            return Err(Error::MissingCheckpoint(bpath.display().to_string()));
        }
        let blob = std::fs::read(&bpath)?;
        let actual = sha256_hex(&blob);
        if actual != manifest.sha256 {
            return Err(Error::HashMismatch {
                expected: manifest.sha256.clone(),
                actual,
            });
        }
        let mut names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] >= w[1])
            || manifest
                .tensors
                .iter()
                .zip(&names)
                .any(|(t, n)| t.name != *n)
        {
            return Err(Error::Checkpoint(
                "tensor names must be unique and sorted".into(),
            ));
        }
        let expected: usize = manifest
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if blob.len() != expected * 8 {
            return Err(Error::Checkpoint(format!(
                "blob holds {} bytes but the manifest describes {} values",
                blob.len(),
                expected
            )));
        }
        let mut params = ParamStore::new();
        let mut offset = 0;
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            let data = blob[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset += 8 * n;
            let a = Array::new(t.shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", t.name)))?;
            params.insert(t.name.clone(), a);
        }
        Ok(Self { manifest, params })
    }
}
