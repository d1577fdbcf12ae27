//! Versioned JSON container for named tensors, an optional noise schedule and
//! the configuration that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;

pub const FORMAT: &str = "comanip-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind { expected: String, found: String },
    #[error("config hash mismatch: stored {stored}, recomputed {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("tensor `{name}` is malformed")]
    Tensor { name: String },
}

/// SHA-256 (hex) of the compact JSON form of a configuration.
pub fn config_hash<C: Serialize + ?Sized>(config: &C) -> Result<String, serde_json::Error> {
    let value = serde_json::to_value(config)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// `β_1..β_T̂` when the model is a diffusion model.
    pub schedule: Option<Vec<f64>>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new<C: Serialize + ?Sized>(
        kind: &str,
        config: &C,
        schedule: Option<Vec<f64>>,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self, CheckpointError> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            config_hash: config_hash(&config)?,
            config,
            schedule,
            tensors,
        })
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str, expected_kind: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(CheckpointError::Version {
                format: ck.format,
                version: ck.version,
            });
        }
        if ck.kind != expected_kind {
            return Err(CheckpointError::Kind {
                expected: expected_kind.into(),
                found: ck.kind,
            });
        }
        let computed = config_hash(&ck.config)?;
        if computed != ck.config_hash {
            return Err(CheckpointError::HashMismatch {
                stored: ck.config_hash,
                computed,
            });
        }
        for (name, t) in &ck.tensors {
            if Tensor::new(t.shape().to_vec(), t.data().to_vec()).is_err() {
                return Err(CheckpointError::Tensor { name: name.clone() });
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()?).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, expected_kind)
    }

    /// Config section deserialized into its concrete type.
    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C, CheckpointError> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut t = BTreeMap::new();
        t.insert(
            "w".to_string(),
            Tensor::new(vec![2, 2], vec![0.1, -2.5, 1e-300, 3.0]).unwrap(),
        );
        Checkpoint::new("intent", &serde_json::json!({"width": 8}), Some(vec![0.1, 0.2]), t).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_json(&ck.to_json().unwrap(), "intent").unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn wrong_kind_and_tampered_config_are_rejected() {
        let ck = sample();
        let text = ck.to_json().unwrap();
        assert!(matches!(
            Checkpoint::from_json(&text, "ppo"),
            Err(CheckpointError::Kind { .. })
        ));
        let tampered = text.replace("\"width\":8", "\"width\":9");
        assert!(matches!(
            Checkpoint::from_json(&tampered, "intent"),
            Err(CheckpointError::HashMismatch { .. })
        ));
    }

    #[test]
    fn inconsistent_tensor_is_rejected() {
        let text = sample()
            .to_json()
            .unwrap()
            .replace("\"shape\":[2,2]", "\"shape\":[3,2]");
        assert!(matches!(
            Checkpoint::from_json(&text, "intent"),
            Err(CheckpointError::Tensor { .. })
        ));
    }
}
