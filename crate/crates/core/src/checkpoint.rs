//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "MBMCKPT\0"
//! u32       format version (1)
//! u64       header length in bytes
//! header    UTF-8 JSON (see `Header`)
//! payload   f64 values, little-endian, concatenated in header order
//! ```
//!
//! Each header tensor entry records its name, shape, group (`param`,
//! `adam_m` or `adam_v`), trainable flag and element offset into the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MBMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    group: Group,
    #[serde(default = "yes")]
    trainable: bool,
    offset: usize,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    #[serde(default)]
    meta: serde_json::Value,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

/// Model weights plus what is needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    /// Free-form run information (e.g. the training configuration).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut items: Vec<(&str, &Tensor, Group, bool)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.as_str(), &p.value, Group::Param, p.trainable))
            .collect();
        if let Some(adam) = &self.optimizer {
            if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
                return Err(Error::config("optimizer state does not match the parameters"));
            }
            for (group, moments) in [(Group::AdamM, &adam.m), (Group::AdamV, &adam.v)] {
                for ((_, p), t) in self.params.iter().zip(moments) {
                    items.push((p.name.as_str(), t, group, true));
                }
            }
        }
        let mut tensors = Vec::with_capacity(items.len());
        let mut offset = 0;
        for &(name, t, group, trainable) in &items {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                group,
                trainable,
                offset,
            });
            offset += t.len();
        }
        let header = Header {
            model: self.model.clone(),
            step: self.step,
            meta: self.meta.clone(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                config: a.config,
                t: a.t,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::config(format!("encoding checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t, _, _) in items {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(path, detail);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values".into()));
        }
        let n_values = payload.len() / 8;
        let read = |e: &TensorEntry| -> Result<Tensor> {
            let len: usize = e.shape.iter().product();
            if e.offset + len > n_values {
                return Err(bad(format!("tensor {} extends past the payload", e.name)));
            }
            let data = payload[8 * e.offset..8 * (e.offset + len)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(e.shape.clone(), data)
        };

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let t = read(e)?;
            match e.group {
                Group::Param => {
                    let id = params.add(e.name.clone(), t).map_err(|err| bad(err.to_string()))?;
                    params.set_trainable(id, e.trainable);
                }
                Group::AdamM => m.push((e.name.clone(), t)),
                Group::AdamV => v.push((e.name.clone(), t)),
            }
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(oh) => {
                let order = |list: Vec<(String, Tensor)>, what: &str| -> Result<Vec<Tensor>> {
                    if list.len() != params.len() {
                        return Err(bad(format!("{what} has {} tensors for {} parameters", list.len(), params.len())));
                    }
                    list.into_iter()
                        .zip(params.iter())
                        .map(|((name, t), (_, p))| {
                            if name != p.name || t.shape() != p.value.shape() {
                                Err(bad(format!("{what} entry {name} does not match parameter {}", p.name)))
                            } else {
                                Ok(t)
                            }
                        })
                        .collect()
                };
                Some(Adam {
                    config: oh.config,
                    t: oh.t,
                    m: order(m, "first moment")?,
                    v: order(v, "second moment")?,
                })
            }
        };
        Ok(Checkpoint {
            model: header.model,
            step: header.step,
            params,
            optimizer,
            meta: header.meta,
        })
    }

    /// Writes to a temporary sibling and renames it into place, so an
    /// interrupted save never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies every parameter into `store` by name. Names and shapes must
    /// match exactly in both directions.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (_, p) in self.params.iter() {
            let id = store
                .id(&p.name)
                .ok_or_else(|| Error::config(format!("model has no parameter {}", p.name)))?;
            if store.get(id).shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "parameter {}: checkpoint shape {:?} vs model {:?}",
                    p.name,
                    p.value.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = p.value.clone();
            store.set_trainable(id, p.trainable);
        }
        Ok(())
    }
}
