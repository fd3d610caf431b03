//! Little-endian tensor bundle used for base and compressed checkpoints.
//!
//! ```text
//! "BTNS" | version u32 = 1 | tensor count u64
//! per tensor: name_len u16 | name (UTF-8) | rank u8 | dims u64 * rank | dtype u8 | payload
//! ```
//!
//! dtype 0 is `f32`; dtype 1 is raw bytes, used for small JSON metadata
//! records such as the model config and per-layer factor metadata.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::transformer::Block;
use super::{Category, CompressedModel, LayerId, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::factorize::{FactorMethod, LowRankFactors};

const MAGIC: &[u8; 4] = b"BTNS";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        let data = m.iter().map(|&v| v as f32).collect();
        Self { name: name.into(), dims: vec![m.nrows(), m.ncols()], data: TensorData::F32(data) }
    }

    pub fn from_vector(name: impl Into<String>, v: &Array1<f64>) -> Self {
        Self { name: name.into(), dims: vec![v.len()], data: TensorData::F32(v.iter().map(|&x| x as f32).collect()) }
    }

    pub fn from_json<T: Serialize>(name: impl Into<String>, value: &T) -> Result<Self> {
        let bytes = serde_json::to_vec(value)?;
        Ok(Self { name: name.into(), dims: vec![bytes.len()], data: TensorData::Bytes(bytes) })
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::F32(v), &[r, c]) => Ok(Array2::from_shape_fn((r, c), |(i, j)| f64::from(v[i * c + j]))),
            _ => Err(Error::Format(format!("tensor {} is not an f32 matrix", self.name))),
        }
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::F32(v), &[_]) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
            _ => Err(Error::Format(format!("tensor {} is not an f32 vector", self.name))),
        }
    }

    pub fn to_json<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        match &self.data {
            TensorData::Bytes(b) => Ok(serde_json::from_slice(b)?),
            TensorData::F32(_) => Err(Error::Format(format!("tensor {} is not a metadata record", self.name))),
        }
    }

    fn element_count(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    tensors: Vec<Tensor>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a tensor by name.
    pub fn insert(&mut self, t: Tensor) {
        match self.tensors.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => self.tensors.push(t),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("bundle has no tensor {name:?}")))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
            let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format(format!("tensor rank too large: {}", t.name)))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[rank])?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &t.data {
                TensorData::F32(v) => {
                    if v.len() != t.element_count() {
                        return Err(Error::Format(format!("tensor {} payload/dims mismatch", t.name)));
                    }
                    w.write_all(&[DTYPE_F32])?;
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::Bytes(b) => {
                    if b.len() != t.element_count() {
                        return Err(Error::Format(format!("tensor {} payload/dims mismatch", t.name)));
                    }
                    w.write_all(&[DTYPE_BYTES])?;
                    w.write_all(b)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a tensor bundle (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bundle version {version}")));
        }
        let count = read_u64(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1)?;
            let dims = (0..b1[0]).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            r.read_exact(&mut b1)?;
            let data = match b1[0] {
                DTYPE_F32 => {
                    let mut raw = vec![0u8; n * 4];
                    r.read_exact(&mut raw)?;
                    TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
                }
                DTYPE_BYTES => {
                    let mut raw = vec![0u8; n];
                    r.read_exact(&mut raw)?;
                    TensorData::Bytes(raw)
                }
                other => return Err(Error::Format(format!("unknown dtype tag {other} for tensor {name}"))),
            };
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FactorMeta {
    method: FactorMethod,
    rank: usize,
}

impl Model {
    pub fn to_bundle(&self) -> Result<TensorBundle> {
        let mut b = TensorBundle::new();
        b.insert(Tensor::from_json("config", self.config())?);
        b.insert(Tensor::from_matrix("embedding", self.embedding()));
        for (l, block) in self.blocks().iter().enumerate() {
            b.insert(Tensor::from_vector(format!("layers.{l}.attn_norm"), &block.attn_norm));
            b.insert(Tensor::from_vector(format!("layers.{l}.mlp_norm"), &block.mlp_norm));
            for c in Category::ALL {
                b.insert(Tensor::from_matrix(LayerId::new(l, c).to_string(), &block.weights[c.index()]));
            }
        }
        b.insert(Tensor::from_vector("final_norm", self.final_norm()));
        Ok(b)
    }

    /// Loads a model; in a compressed bundle, replaced layers have no dense
    /// weight and are filled with zeros (they are never read).
    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let config: ModelConfig = b.require("config")?.to_json()?;
        config.validate()?;
        let embedding = b.require("embedding")?.to_matrix()?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut weights = Vec::with_capacity(7);
            for c in Category::ALL {
                let id = LayerId::new(l, c);
                let w = match b.get(&id.to_string()) {
                    Some(t) => t.to_matrix()?,
                    None if b.get(&format!("{id}.A")).is_some() => Array2::zeros(c.shape(&config)),
                    None => return Err(Error::Format(format!("bundle has no tensor {id:?}"))),
                };
                weights.push(w);
            }
            blocks.push(Block {
                attn_norm: b.require(&format!("layers.{l}.attn_norm"))?.to_vector()?,
                mlp_norm: b.require(&format!("layers.{l}.mlp_norm"))?.to_vector()?,
                weights,
            });
        }
        let final_norm = b.require("final_norm")?.to_vector()?;
        Model::from_parts(config, embedding, blocks, final_norm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_bundle()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

impl CompressedModel {
    /// Base tensors for dense layers, `<id>.B`, `<id>.A`, `<id>.bias` and a
    /// `<id>.factor_meta` record for replaced ones, and the allocation if
    /// one is attached.
    pub fn to_bundle(&self) -> Result<TensorBundle> {
        let mut b = self.base().to_bundle()?;
        b.tensors.retain(|t| t.name.parse::<LayerId>().map(|id| !self.factors().contains_key(&id)).unwrap_or(true));
        for (id, f) in self.factors() {
            b.insert(Tensor::from_matrix(format!("{id}.B"), &f.b));
            b.insert(Tensor::from_matrix(format!("{id}.A"), &f.a));
            b.insert(Tensor::from_vector(format!("{id}.bias"), &f.bias));
            b.insert(Tensor::from_json(format!("{id}.factor_meta"), &FactorMeta { method: f.method, rank: f.rank() })?);
        }
        if let Some(alloc) = self.allocation() {
            b.insert(Tensor::from_json("allocation", &alloc.to_file())?);
        }
        Ok(b)
    }

    /// Reads a bundle written by [`CompressedModel::to_bundle`]. A plain base
    /// checkpoint loads as a compressed model with no replaced layers.
    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let base = Arc::new(Model::from_bundle(b)?);
        let mut factors = BTreeMap::new();
        for id in LayerId::all(base.config()) {
            let Some(meta) = b.get(&format!("{id}.factor_meta")) else { continue };
            let meta: FactorMeta = meta.to_json()?;
            let f = LowRankFactors::new(
                b.require(&format!("{id}.B"))?.to_matrix()?,
                b.require(&format!("{id}.A"))?.to_matrix()?,
                b.require(&format!("{id}.bias"))?.to_vector()?,
                meta.method,
            )?;
            if f.rank() != meta.rank {
                return Err(Error::Format(format!("{id}: metadata rank {} but factors have rank {}", meta.rank, f.rank())));
            }
            factors.insert(id, f);
        }
        CompressedModel::new(base, factors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_bundle()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}
