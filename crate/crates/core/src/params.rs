//! Named parameter storage and the on-disk tensor archive.
//!
//! Base-model tensors live under the `base.` prefix; everything added for
//! layout control (encoder and assemble blocks) lives under `assemble.`.
//!
//! Archive layout:
//!
//! ```text
//! magic   8 bytes   "IASMCKPT"
//! version u32 LE    1
//! length  u64 LE    byte length of the manifest
//! manifest          UTF-8 JSON {"metadata": ..., "tensors": [{name, shape, dtype, offset, trainable}]}
//! data              little-endian f32 values; `offset` is relative to the start of this section
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Matrix, Real};

pub const BASE_PREFIX: &str = "base.";
pub const LAYOUT_PREFIX: &str = "assemble.";

const MAGIC: &[u8; 8] = b"IASMCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Matrix<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        Ok(id)
    }

    /// Inserts or overwrites by name.
    pub fn upsert(&mut self, name: &str, value: Matrix<T>, trainable: bool) -> ParamId {
        match self.index.get(name) {
            Some(&id) => {
                self.params[id.0].value = value;
                self.params[id.0].trainable = trainable;
                id
            }
            None => self.insert(name, value, trainable).expect("name checked absent"),
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Looks up a parameter that the model layout guarantees to exist.
    pub fn expect_id(&self, name: &str) -> ParamId {
        self.id(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: [p.value.rows(), p.value.cols()],
                trainable: p.trainable,
                data: p.value.data().iter().map(|x| x.to_f64_lossy() as f32).collect(),
            })
            .collect()
    }

    /// Overwrites values (and trainable flags) of every tensor in `tensors`
    /// whose name matches `filter`; unknown names are inserted.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor], filter: impl Fn(&str) -> bool) -> Result<()> {
        for t in tensors.iter().filter(|t| filter(&t.name)) {
            let m = Matrix::from_vec(
                t.shape[0],
                t.shape[1],
                t.data.iter().map(|&x| lit::<T>(x as f64)).collect(),
            );
            if let Some(existing) = self.get(&t.name) {
                if existing.shape() != m.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {:?}, model expects {:?}",
                        t.name,
                        m.shape(),
                        existing.shape()
                    )));
                }
            }
            self.upsert(&t.name, m, t.trainable);
        }
        Ok(())
    }
}

/// Weight initialization helpers.
pub fn normal_matrix<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| lit::<T>(dist.sample(rng)))
}

/// Xavier/Glorot-uniform style scale for an `out × in` weight.
pub fn xavier<T: Real>(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Matrix<T> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Matrix::from_fn(out_dim, in_dim, |_, _| lit::<T>(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub trainable: bool,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape,
                    dtype: "f32".into(),
                    offset,
                    trainable: t.trainable,
                };
                offset += 4 * t.data.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest { metadata: self.metadata.clone(), tensors: entries };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize.checked_add(mlen).ok_or_else(|| bad("manifest length overflow"))?;
        if bytes.len() < data_start {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor {} extends past end of archive", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name: e.name, shape: e.shape, trainable: e.trainable, data: values });
        }
        Ok(Self { metadata: manifest.metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Git-style content address: SHA-256 over `"blob <len>\0" ++ content`.
pub fn content_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
