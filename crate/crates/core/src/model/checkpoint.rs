//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `RINSCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every tensor as raw little-endian `f64` values in manifest order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelError, ModelParams, RecursionPolicy, RecursiveModel};
use crate::ledger::ModelDims;
use crate::signature::Signature;

pub const MAGIC: &[u8; 8] = b"RINSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has {got} values, expected {expected}")]
    TensorSize {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) from the start of the data section.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dims: ModelDims,
    pub signature: Signature,
    pub policy: RecursionPolicy,
    pub step: u64,
    /// Free-form state owned by the caller (optimizer counters, run ids).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus manifest metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub signature: Signature,
    pub policy: RecursionPolicy,
    pub step: u64,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &RecursiveModel, step: u64) -> Self {
        let names = model.params.names();
        let shapes = model.params.shapes();
        let tensors = names
            .into_iter()
            .zip(shapes)
            .zip(model.params.tensors())
            .map(|((n, s), t)| (n, s, t.clone()))
            .collect();
        Checkpoint {
            dims: model.dims,
            signature: model.plan.source().clone(),
            policy: model.policy.clone(),
            step,
            extra: serde_json::Value::Null,
            tensors,
        }
    }

    /// Appends the tensors of `params` under `prefix` (e.g. optimizer moments).
    pub fn push_params(&mut self, prefix: &str, params: &ModelParams) {
        for ((n, s), t) in params.names().into_iter().zip(params.shapes()).zip(params.tensors()) {
            self.tensors.push((format!("{prefix}{n}"), s, t.clone()));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, t)| t.as_slice())
    }

    /// Fills `template` from tensors named `prefix + canonical name`.
    pub fn load_params(&self, prefix: &str, template: &mut ModelParams) -> Result<(), CheckpointError> {
        let names = template.names();
        for (name, dst) in names.iter().zip(template.tensors_mut()) {
            let key = format!("{prefix}{name}");
            let src = self.tensor(&key).ok_or(CheckpointError::MissingTensor(key.clone()))?;
            if src.len() != dst.len() {
                return Err(CheckpointError::TensorSize {
                    name: key,
                    expected: dst.len(),
                    got: src.len(),
                });
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<RecursiveModel, CheckpointError> {
        let mut model = RecursiveModel::new(&self.signature, self.dims, self.policy.clone(), 0)?;
        self.load_params("", &mut model.params)?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                    len: data.len(),
                };
                offset += data.len();
                e
            })
            .collect();
        let manifest = Manifest {
            dims: self.dims,
            signature: self.signature.clone(),
            policy: self.policy.clone(),
            step: self.step,
            extra: self.extra.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(offset * 8);
        for (_, _, data) in &self.tensors {
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensors = manifest
            .tensors
            .into_iter()
            .map(|e| {
                let slice = values.get(e.offset..e.offset + e.len).ok_or_else(|| {
                    CheckpointError::TensorSize {
                        name: e.name.clone(),
                        expected: e.len,
                        got: values.len().saturating_sub(e.offset),
                    }
                })?;
                Ok((e.name, e.shape, slice.to_vec()))
            })
            .collect::<Result<_, CheckpointError>>()?;
        Ok(Checkpoint {
            dims: manifest.dims,
            signature: manifest.signature,
            policy: manifest.policy,
            step: manifest.step,
            extra: manifest.extra,
            tensors,
        })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(io::BufReader::new(fs::File::open(path)?))
    }
}
