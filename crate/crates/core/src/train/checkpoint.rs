//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header (model config, tensor index, free-form metadata), then every
//! tensor's `f32` data little-endian in index order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{MipaError, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"MIPACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    /// Whatever the writer attached (experiment config, epoch, metrics).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new<F: Real>(model: &ModelConfig, params: &ParamStore<F>, meta: serde_json::Value) -> Self {
        Self {
            model: model.clone(),
            params: params.cast(),
            meta,
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            dtype: "f32".into(),
            model: self.model.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, t) in self.params.iter() {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let bad = |m: &str| MipaError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(MipaError::Checkpoint(format!(
                "format version {version} does not match supported version {CHECKPOINT_VERSION}"
            )));
        }
        input.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.dtype != "f32" {
            return Err(MipaError::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            input
                .read_exact(&mut raw)
                .map_err(|_| MipaError::Checkpoint(format!("truncated data for {}", e.name)))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|e| bad(&e.to_string()))?;
            params.insert(&e.name, t);
        }
        Ok(Self {
            model: header.model,
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Reject a checkpoint whose architecture differs from `expected`.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let a = &self.model;
        let same = a.encoder == expected.encoder && a.image_size == expected.image_size && a.num_classes == expected.num_classes;
        if same {
            Ok(())
        } else {
            Err(MipaError::Checkpoint(format!(
                "checkpoint model {} does not match config model {}",
                serde_json::to_string(a)?,
                serde_json::to_string(expected)?
            )))
        }
    }
}
