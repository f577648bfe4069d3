//! Single-file checkpoints.
//!
//! Layout: `b"GTCK"`, format version (`u32` LE), header length (`u32` LE), a
//! JSON header (run config, epoch, tensor index, optimizer hyperparameters),
//! then every tensor as little-endian `f64`: parameters first, followed by
//! the optimizer's first and second moments when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Param};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"GTCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<Param>,
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig, epoch: usize, optimizer: Option<&Adam>) -> Self {
        Self { config: config.clone(), epoch, params: model.store.params().to_vec(), optimizer: optimizer.cloned() }
    }

    /// Rebuilds the network and loads the stored weights.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(&self.config.model, self.config.seed)?;
        m.store.load_values(&self.params).map_err(|e| Error::Config(format!("checkpoint does not fit the model: {e}")))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            tensors: self
                .params
                .iter()
                .map(|p| TensorEntry { name: p.name.clone(), rows: p.value.rows, cols: p.value.cols })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        let mut push = |m: &Mat| {
            for v in &m.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in &self.params {
            push(&p.value);
        }
        if let Some(a) = &self.optimizer {
            let (m, v) = a.moments();
            m.iter().chain(v).for_each(&mut push);
        }
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic header)"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(Error::Version { path: path.into(), found: version, expected: VERSION });
        }
        let hlen = word(8) as usize;
        if bytes.len() < 12 + hlen {
            return Err(Error::format(path, "truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| Error::json(path, e))?;
        let mut data = bytes[12 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        let expected = total * if header.optimizer.is_some() { 3 } else { 1 } * 8;
        if bytes.len() - 12 - hlen != expected {
            return Err(Error::format(path, format!("checkpoint payload is {} bytes, expected {expected}", bytes.len() - 12 - hlen)));
        }
        let mut take = |t: &TensorEntry| Mat::from_vec(t.rows, t.cols, data.by_ref().take(t.rows * t.cols).collect());
        let params: Vec<Param> = header.tensors.iter().map(|t| Param { name: t.name.clone(), value: take(t) }).collect();
        let optimizer = header.optimizer.map(|o| {
            let m = header.tensors.iter().map(&mut take).collect();
            let v = header.tensors.iter().map(&mut take).collect();
            Adam::from_parts(o.lr, o.beta1, o.beta2, o.eps, o.step, m, v)
        });
        header.config.validate()?;
        Ok(Self { config: header.config, epoch: header.epoch, params, optimizer })
    }
}
