//! Versioned binary checkpoint.
//!
//! ```text
//! offset 0   magic  b"XFUSECKP"
//!        8   u32 LE format version (1)
//!        12  u64 LE header length N
//!        20  N bytes of UTF-8 JSON header
//!        20+N raw f32 LE tensor data, in header order
//! ```
//!
//! The JSON header holds the training configuration, completed epoch count,
//! epoch log, and a tensor table `[{name, role, shape}]` where `role` is
//! `param` or `velocity`. Velocity entries follow all parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

use super::train::{EpochLog, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"XFUSECKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Param,
    Velocity,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Shape4,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    log: Vec<EpochLog>,
    tensors: Vec<TensorEntry>,
}

/// Snapshot of a [`Trainer`].
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    pub params: Vec<(String, Tensor4<f32>)>,
    pub velocity: Vec<Tensor4<f32>>,
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        Self {
            config: t.cfg,
            epoch: t.epoch,
            log: t.log.clone(),
            params: t.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            velocity: t.velocity.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                role: Role::Param,
                shape: t.shape(),
            })
            .collect();
        tensors.extend(self.params.iter().zip(&self.velocity).map(|((name, _), v)| TensorEntry {
            name: name.clone(),
            role: Role::Velocity,
            shape: v.shape(),
        }));
        let header = serde_json::to_vec(&Header {
            config: self.config,
            epoch: self.epoch,
            log: self.log.clone(),
            tensors,
        })
        .expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.iter().map(|(_, t)| t).chain(&self.velocity) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut data = &bytes[20 + hlen..];
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        for entry in header.tensors {
            let n = entry.shape.numel() * 4;
            if data.len() < n {
                return Err(bad(format!("truncated data for {}", entry.name)));
            }
            let values = data[..n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[n..];
            let t = Tensor4::from_vec(entry.shape, values)?;
            match entry.role {
                Role::Param => params.push((entry.name, t)),
                Role::Velocity => velocity.push(t),
            }
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        if velocity.len() != params.len() {
            return Err(bad("velocity table does not match parameters".into()));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            log: header.log,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the model from the stored configuration and installs the saved
    /// parameters and optimiser state.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut t = Trainer::new(self.config)?;
        let mismatch = |msg: String| Error::Checkpoint {
            path: Default::default(),
            msg,
        };
        if t.store.len() != self.params.len() {
            return Err(mismatch(format!(
                "{} stored tensors, model has {}",
                self.params.len(),
                t.store.len()
            )));
        }
        for (param, (name, value)) in t.store.iter_mut().zip(self.params) {
            if param.name != name || param.value.shape() != value.shape() {
                return Err(mismatch(format!(
                    "stored {name} {} does not match model {} {}",
                    value.shape(),
                    param.name,
                    param.value.shape()
                )));
            }
            param.value = value;
        }
        t.velocity = self.velocity;
        t.epoch = self.epoch;
        t.log = self.log;
        Ok(t)
    }
}
