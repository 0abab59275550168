//! Single-file checkpoints.
//!
//! Layout (little-endian): `"TMCN"`, `u32` version, `u32` header length, a
//! JSON header with the training config and view widths, `u32` parameter
//! count, then per parameter `u32` name length, name bytes, `u32` rank,
//! `rank` x `u32` extents and the `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmcn_core::model::TmcnModel;
use tmcn_core::train::TrainConfig;
use tmcn_core::Tensor;

use crate::config::{ConfigError, ConfigFile};

pub const MAGIC: &[u8; 4] = b"TMCN";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint ends early at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last parameter")]
    Trailing(usize),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("parameter {name:?}: {reason}")]
    Parameter { name: String, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] tmcn_core::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    view_dims: Vec<usize>,
    config: ConfigFile,
}

/// Serialized checkpoint bytes for a model trained under `config`.
pub fn to_bytes(model: &TmcnModel, config: &TrainConfig) -> Vec<u8> {
    let header = Header {
        view_dims: model.config.view_dims.clone(),
        config: ConfigFile::from_train_config(config),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Rebuilds the model and its training config from checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<(TmcnModel, TrainConfig), CheckpointError> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(String::from_utf8_lossy(magic).into_owned()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let config = header.config.apply(&TrainConfig::default())?;
    let mut model = TmcnModel::new(config.model_config(&header.view_dims), config.seed)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(CheckpointError::Header(format!(
            "{count} parameters stored, the configured model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let id = model.store.find(&name).ok_or_else(|| CheckpointError::Parameter {
            name: name.clone(),
            reason: "not part of the configured model".into(),
        })?;
        let slot = model.store.get_mut(id);
        if slot.shape() != shape.as_slice() {
            return Err(CheckpointError::Parameter {
                name,
                reason: format!("stored shape {shape:?}, model expects {:?}", slot.shape()),
            });
        }
        *slot = Tensor::new(shape, data).map_err(|e| CheckpointError::Parameter {
            name,
            reason: e.to_string(),
        })?;
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.at));
    }
    Ok((model, config))
}

pub fn save(path: &Path, model: &TmcnModel, config: &TrainConfig) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model, config)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(TmcnModel, TrainConfig), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
