use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Backbone, sampler head and prediction heads: trained at the base rate.
    Backbone,
    /// Attention modules and spatial encodings: trained at the decoder rate.
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    group: ParamGroup,
}

/// Named, grouped model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<HeaderEntry>,
}

const CHECKPOINT_FORMAT: &str = "gf3d-params-v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, group });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter drawn uniformly from `[-1/√fan_in, 1/√fan_in]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        fan_in: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let shape = shape.into();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_parts(shape, data), group)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Serializes as `u64` header length, JSON header, then every value as
    /// little-endian `f64` in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            tensors: self
                .params
                .iter()
                .map(|p| HeaderEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    group: p.group,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.num_scalars());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt_err = |offset: usize, msg: &str| Error::Format {
            offset: offset as u64,
            msg: msg.into(),
        };
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| fmt_err(0, "truncated header length"))?
            .try_into()
            .unwrap();
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| fmt_err(8, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| fmt_err(8, &format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(fmt_err(8, &format!("unknown format {:?}", header.format)));
        }
        let mut off = 8 + hlen;
        let mut store = ParamStore::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(off..off + 8 * n)
                .ok_or_else(|| fmt_err(off, &format!("truncated values for {}", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 8 * n;
            store.add(e.name, Tensor::from_parts(e.shape, data), e.group);
        }
        if off != bytes.len() {
            return Err(fmt_err(off, "trailing bytes after last tensor"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies values from `other` into parameters with the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            bail!(
                Data,
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            );
        }
        for p in &mut self.params {
            let Some(id) = other.find(&p.name) else {
                bail!(Data, "checkpoint is missing parameter {}", p.name);
            };
            let v = other.value(id);
            if v.shape() != p.value.shape() {
                bail!(
                    Data,
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                );
            }
            p.value = v.clone();
        }
        Ok(())
    }
}
