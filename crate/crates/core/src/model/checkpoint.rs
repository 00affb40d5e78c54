//! `weights.bin` holds every parameter as little-endian f64 in store order;
//! `model.json` beside it records the config and the parameter table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::numerics::ParamInfo;

pub const CHECKPOINT_VERSION: &str = "1.0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub spec_version: String,
    pub config: ModelConfig,
    pub params: Vec<ParamInfo>,
    pub total_params: usize,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `weights.bin` and `model.json` into `dir`.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest = ModelManifest {
        spec_version: CHECKPOINT_VERSION.to_string(),
        config: model.config().clone(),
        params: model.params().infos().to_vec(),
        total_params: model.params().len(),
    };
    let bytes: Vec<u8> = model
        .params()
        .flat()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let wpath = dir.join("weights.bin");
    fs::write(&wpath, bytes).map_err(io(&wpath))?;
    let mpath = dir.join("model.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(io(&mpath))?;
    Ok(())
}

/// Loads a checkpoint from a directory or from the path of its `weights.bin`.
pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    if !path.exists() {
        return Err(CheckpointError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        });
    }
    let dir = if path.is_dir() {
        path
    } else {
        path.parent().unwrap_or(Path::new("."))
    };
    let wpath = if path.is_dir() {
        dir.join("weights.bin")
    } else {
        path.to_path_buf()
    };
    let mpath = dir.join("model.json");
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: ModelManifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Format {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
    if manifest.spec_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format {
            path: mpath,
            reason: format!("unsupported version {}", manifest.spec_version),
        });
    }
    let bytes = fs::read(&wpath).map_err(io(&wpath))?;
    if bytes.len() != manifest.total_params * 8 {
        return Err(CheckpointError::Format {
            path: wpath,
            reason: format!(
                "{} bytes for {} parameters",
                bytes.len(),
                manifest.total_params
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut model = Model::new(manifest.config, 0)?;
    if model.params().infos() != manifest.params.as_slice() {
        return Err(CheckpointError::Format {
            path: mpath,
            reason: "parameter table does not match the configured architecture".into(),
        });
    }
    model.set_flat(&values)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::default(), 21).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let loaded = load_checkpoint(&dir.path().join("weights.bin")).unwrap();
        assert_eq!(loaded.params().flat(), model.params().flat());
        assert_eq!(loaded.config(), model.config());
        let again = load_checkpoint(dir.path()).unwrap();
        assert_eq!(again.params().flat(), model.params().flat());
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::default(), 21).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let w = dir.path().join("weights.bin");
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::Format { .. })
        ));
    }
}
