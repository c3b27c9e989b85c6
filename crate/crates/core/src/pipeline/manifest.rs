//! Stage manifests: input/output hashes, record counts, and notes. Hashes
//! let an unchanged stage be skipped; artifact files themselves stay
//! byte-identical across reruns, while the manifest carries the wall-clock
//! duration and is excluded from that guarantee.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileStamp {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
    pub counts: BTreeMap<String, u64>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub duration_ms: u128,
    /// Set when the stage stopped early on a provider failure; outputs are
    /// partial and must not be cached.
    #[serde(default)]
    pub partial: bool,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn stamp(path: &Path) -> Result<FileStamp> {
    Ok(FileStamp {
        path: path.to_path_buf(),
        sha256: file_sha256(path)?,
    })
}

impl StageManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse {
            message: e.to_string(),
            offset: None,
        })?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<StageManifest> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| Error::Parse {
            message: format!("manifest {}: {e}", path.display()),
            offset: None,
        })
    }

    /// True when every recorded input and output still exists with the same
    /// hash, meaning the stage can be skipped.
    pub fn still_fresh(&self) -> bool {
        if self.partial {
            return false;
        }
        self.inputs
            .iter()
            .chain(self.outputs.iter())
            .all(|stamp_rec| match file_sha256(&stamp_rec.path) {
                Ok(hash) => hash == stamp_rec.sha256,
                Err(_) => false,
            })
    }
}
