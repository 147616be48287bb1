//! Self-describing JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "mcqa-checkpoint",
//!   "version": 1,
//!   "header": {"kind": "toy", "hidden_dim": 32, "layers": 2, "ffn_dim": 256,
//!              "vocab_size": 1234, "positional": true, "seed": 0},
//!   "tensors": [{"name": "encoder.embedding", "shape": [1234, 32], "data": [...]}, ...],
//!   "extras": {...}
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::EncoderKind;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mcqa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: EncoderKind,
    pub hidden_dim: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub positional: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_matrix(name: &str, m: &Array2<f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: m.shape().to_vec(),
            data: m.iter().copied().collect(),
        }
    }

    pub fn from_vector(name: &str, v: &Array1<f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub header: CheckpointHeader,
    pub tensors: Vec<NamedTensor>,
    /// Non-tensor state (tokenizer, configs) keyed by name.
    #[serde(default)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, tensors: Vec<NamedTensor>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            header,
            tensors,
            extras: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(file)).map_err(|e| bad(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            None => return Err(bad("missing version field".into())),
            Some(v) if v != CHECKPOINT_VERSION as u64 => {
                return Err(bad(format!("unsupported version {v}, expected {CHECKPOINT_VERSION}")))
            }
            Some(_) => {}
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unknown format {:?}", ckpt.format)));
        }
        for t in &ckpt.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(bad(format!(
                    "tensor {} has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
        }
        Ok(ckpt)
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Shape(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.tensor(name)?;
        match t.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), t.data.clone()).expect("checked on read")),
            _ => Err(Error::Shape(format!(
                "{name}: expected a matrix, found shape {:?}",
                t.shape
            ))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let t = self.tensor(name)?;
        match t.shape[..] {
            [_] => Ok(Array1::from_vec(t.data.clone())),
            _ => Err(Error::Shape(format!(
                "{name}: expected a vector, found shape {:?}",
                t.shape
            ))),
        }
    }
}
