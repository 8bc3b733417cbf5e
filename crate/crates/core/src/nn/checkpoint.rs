use super::{Mat, Parameters};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor, values in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Serialized model: architecture tag, the config that trained it, and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub tensors: Vec<TensorRecord>,
}

/// SHA-256 of the compact JSON encoding.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json values always serialize");
    hex::encode(Sha256::digest(&bytes))
}

impl Checkpoint {
    pub fn capture<P: Parameters>(kind: &str, config: serde_json::Value, model: &P) -> Self {
        let tensors = model
            .tensor_names()
            .into_iter()
            .zip(model.tensors())
            .map(|(name, t)| TensorRecord {
                name,
                rows: t.nrows(),
                cols: t.ncols(),
                data: t.transpose().iter().copied().collect(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash(&config),
            config,
            tensors,
        }
    }

    /// Copies weights into a model of the same architecture.
    pub fn restore_into<P: Parameters>(&self, model: &mut P) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint version {} is not supported",
                self.version
            )));
        }
        if config_hash(&self.config) != self.config_hash {
            return Err(Error::Parse("checkpoint config hash does not match".into()));
        }
        let names = model.tensor_names();
        if names.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((rec, name), t) in self.tensors.iter().zip(&names).zip(model.tensors_mut()) {
            if &rec.name != name || rec.rows != t.nrows() || rec.cols != t.ncols() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {} ({}x{}) does not fit {} ({}x{})",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    name,
                    t.nrows(),
                    t.ncols()
                )));
            }
            if rec.data.len() != rec.rows * rec.cols {
                return Err(Error::Shape(format!("tensor {} is truncated", rec.name)));
            }
            *t = Mat::from_row_slice(rec.rows, rec.cols, &rec.data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}
