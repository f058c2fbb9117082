//! Named parameter collections, initialization and checkpoint archives.
//!
//! A checkpoint is a single file: magic `TCKP`, version byte `1`, a
//! little-endian u64 header length, a JSON header describing the model
//! configuration and every tensor's byte range, then the tensors themselves
//! in the binary tensor format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{io as tensor_io, Graph, Tensor, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S: Scalar> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers `name` on the graph as a trainable parameter.
    pub fn var(&self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?.clone()))
    }

    /// Puts `name` on the graph as a constant (frozen parameter).
    pub fn frozen(&self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        Ok(g.constant(self.get(name)?.clone()))
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// True when every tensor has the same bits as `other`'s.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, v)| {
                other.tensors.get(k).is_some_and(|o| {
                    o.shape() == v.shape()
                        && o
                            .data()
                            .iter()
                            .zip(v.data())
                            .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
                })
            })
    }
}

/// Centered uniform with bound `sqrt(6 / fan_in)`.
pub fn fan_in_uniform<S: Scalar, R: Rng>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| S::from_f64_lossy(rng.gen_range(-bound..bound)))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TCKP";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader<C> {
    config: C,
    tensors: Vec<TensorRecord>,
}

/// Writes a parameter store plus its serialized configuration.
pub fn save_checkpoint<S: Scalar, C: Serialize>(
    path: impl AsRef<Path>,
    config: &C,
    params: &ParamStore<S>,
) -> Result<()> {
    let path = path.as_ref();
    let mut blobs = Vec::new();
    let mut records = Vec::new();
    for (name, t) in params.iter() {
        let bytes = tensor_io::encode(t);
        records.push(TensorRecord {
            name: name.clone(),
            offset: blobs.len() as u64,
            len: bytes.len() as u64,
        });
        blobs.extend_from_slice(&bytes);
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config,
        tensors: records,
    })
    .map_err(|e| Error::format(path, "checkpoint header", e))?;
    let mut out = Vec::with_capacity(13 + header.len() + blobs.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blobs);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar, C: for<'de> Deserialize<'de>>(
    path: impl AsRef<Path>,
) -> Result<(C, ParamStore<S>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "magic", "not a checkpoint archive"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::format(path, "version", bytes[4]));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[5..13]);
    let header_len = u64::from_le_bytes(len) as usize;
    let body = 13 + header_len;
    if bytes.len() < body {
        return Err(Error::format(path, "header", "truncated"));
    }
    let header: CheckpointHeader<C> = serde_json::from_slice(&bytes[13..body])
        .map_err(|e| Error::format(path, "header", e))?;
    let blobs = &bytes[body..];
    let mut params = ParamStore::new();
    for rec in header.tensors {
        let (start, end) = (rec.offset as usize, (rec.offset + rec.len) as usize);
        if end > blobs.len() {
            return Err(Error::format(path, &rec.name, "tensor extends past end of archive"));
        }
        params.insert(rec.name, tensor_io::decode(&blobs[start..end], path)?);
    }
    Ok((header.config, params))
}
