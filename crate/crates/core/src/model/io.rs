// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned JSON model files.
//!
//! Layout: `{"version", "config", "weights", "heads", "provenance"?, "sha256"}`
//! written as one compact line. The hash covers the compact serialization of
//! every other field in that order; numbers use shortest round-trip
//! formatting, so save -> load -> save is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NxlError, Result};
use crate::model::{Heads, ModelConfig, ModelSnapshot, Provenance, Weights};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Serialize)]
struct Body<'a> {
    version: u32,
    config: &'a ModelConfig,
    weights: &'a Weights,
    heads: &'a Heads,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: &'a Option<Provenance>,
}

#[derive(Serialize)]
struct FileOut<'a> {
    #[serde(flatten)]
    body: Body<'a>,
    sha256: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileIn {
    version: u32,
    config: ModelConfig,
    weights: Weights,
    heads: Heads,
    #[serde(default)]
    provenance: Option<Provenance>,
    sha256: String,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// SHA-256 of the compact JSON form of a config.
pub fn config_hash(config: &ModelConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

fn body(snapshot: &ModelSnapshot) -> Body<'_> {
    Body {
        version: MODEL_FILE_VERSION,
        config: &snapshot.config,
        weights: &snapshot.weights,
        heads: &snapshot.heads,
        provenance: &snapshot.provenance,
    }
}

fn load_err(reason: impl ToString) -> NxlError {
    NxlError::Load {
        what: "model file".into(),
        reason: reason.to_string(),
    }
}

impl ModelSnapshot {
    /// Hash over the canonical serialization (the value stored in files).
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&body(self)).expect("snapshot serializes"))
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let file = FileOut {
            body: body(self),
            sha256: self.content_hash(),
        };
        let mut out = serde_json::to_vec(&file).expect("snapshot serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes).map_err(load_err)?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| load_err("missing version"))?;
        if version != u64::from(MODEL_FILE_VERSION) {
            return Err(NxlError::UnknownVersion(u32::try_from(version).unwrap_or(u32::MAX)));
        }
        let file: FileIn = serde_json::from_value(value).map_err(load_err)?;
        let snapshot = ModelSnapshot {
            config: file.config,
            weights: file.weights,
            heads: file.heads,
            provenance: file.provenance,
        };
        debug_assert_eq!(file.version, MODEL_FILE_VERSION);
        let computed = snapshot.content_hash();
        if computed != file.sha256 {
            return Err(NxlError::Integrity {
                stored: file.sha256,
                computed,
            });
        }
        snapshot.validate()?;
        Ok(snapshot)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_bytes()).map_err(|e| NxlError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| NxlError::io(path, e))?;
        ModelSnapshot::from_json_bytes(&bytes)
    }
}
