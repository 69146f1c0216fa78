//! Run manifests: enough metadata to verify a rerun byte for byte.

use chrono::{DateTime, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

use crate::Failure;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Written next to every command's outputs. `created_at` honors
/// SOURCE_DATE_EPOCH so archival reruns can be reproduced exactly.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub options: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub tool_version: String,
    pub created_at: String,
}

fn timestamp() -> String {
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(secs) = epoch.parse::<i64>() {
            if let Some(dt) = DateTime::<Utc>::from_timestamp(secs, 0) {
                return dt.to_rfc3339();
            }
        }
    }
    Utc::now().to_rfc3339()
}

pub fn digest_file(path: &Path) -> Result<InputDigest, Failure> {
    let bytes = fs::read(path)
        .map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
    })
}

impl RunManifest {
    pub fn new(
        command: &str,
        options: serde_json::Value,
        seed: Option<u64>,
        input_paths: &[PathBuf],
    ) -> Result<Self, Failure> {
        let inputs = input_paths
            .iter()
            .map(|p| digest_file(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RunManifest {
            command: command.to_string(),
            options,
            seed,
            inputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_at: timestamp(),
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), Failure> {
        let path = out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Failure::Data(format!("manifest serialization failed: {e}")))?;
        fs::write(&path, json + "\n")
            .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
    }
}
