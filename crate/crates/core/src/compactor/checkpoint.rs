//! The `ATPC` checkpoint container.
//!
//! Layout (little-endian): `b"ATPC"`, `u32` version, `u32` config length,
//! config text (`key=value` lines), then tensors until end of file. Each
//! tensor is `u32` name length, name, `u8` dtype, `u32` rank, `u64` dims,
//! payload.

use std::path::Path;

use crate::adapters::{Adapters, LoraFactors, Role};
use crate::error::{Error, Result};
use crate::model::{DecoderLayer, Model, ModelConfig};
use crate::numerics::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ATPC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, widening or narrowing as needed.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.config.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.config.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Format { offset: 0, message: format!("missing config key {key}") })?;
        raw.parse().map_err(|_| Error::Format {
            offset: 0,
            message: format!("config key {key} has unparsable value {raw:?}"),
        })
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.to())
            .ok_or_else(|| Error::Format { offset: 0, message: format!("missing tensor {name}") })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Contract(format!("config entry {k:?} cannot be serialized")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format { offset: 0, message: "bad magic, not an ATPC checkpoint".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format { offset: at as u64, message: format!("config is not UTF-8: {e}") })?;
        let mut config = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format { offset: at as u64, message: format!("config line {line:?} has no '='") })?;
            config.push((k.to_string(), v.to_string()));
        }
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format { offset: start as u64, message: "tensor name is not UTF-8".into() })?
                .to_string();
            let code_at = r.pos;
            let dtype = DType::from_code(r.take(1)?[0])
                .ok_or_else(|| Error::Format { offset: code_at as u64, message: format!("unknown dtype for {name}") })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format {
                    offset: r.pos as u64,
                    message: "dimension overflows usize".into(),
                })?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|c| c.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Format { offset: r.pos as u64, message: format!("tensor {name} is too large") })?;
            let payload_at = r.pos;
            let payload = r.take(count)?;
            let bad = |e: crate::numerics::NumericsError| Error::Format { offset: payload_at as u64, message: e.to_string() };
            let t = match dtype {
                DType::F32 => StoredTensor::F32(
                    Tensor::from_vec(shape, payload.chunks_exact(4).map(f32::read_le).collect()).map_err(bad)?,
                ),
                DType::F64 => StoredTensor::F64(
                    Tensor::from_vec(shape, payload.chunks_exact(8).map(f64::read_le).collect()).map_err(bad)?,
                ),
            };
            tensors.push((name, t));
        }
        Ok(Self { config, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn write_model_config(ck: &mut Checkpoint, c: &ModelConfig) {
    ck.set("n_layers", c.n_layers);
    ck.set("d_hidden", c.d_hidden);
    ck.set("n_heads", c.n_heads);
    ck.set("d_head", c.d_head);
    ck.set("d_int", c.d_int);
    ck.set("vocab", c.vocab);
    ck.set("max_seq", c.max_seq);
    ck.set("norm_eps", c.norm_eps);
}

pub fn read_model_config(ck: &Checkpoint) -> Result<ModelConfig> {
    let c = ModelConfig {
        n_layers: ck.require("n_layers")?,
        d_hidden: ck.require("d_hidden")?,
        n_heads: ck.require("n_heads")?,
        d_head: ck.require("d_head")?,
        d_int: ck.require("d_int")?,
        vocab: ck.require("vocab")?,
        max_seq: ck.require("max_seq")?,
        norm_eps: ck.require("norm_eps")?,
    };
    c.validate()?;
    Ok(c)
}

/// Base or compacted weights. Compacted models also record per-layer widths.
pub fn model_checkpoint<T: Scalar>(model: &Model<T>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set("kind", "model");
    write_model_config(&mut ck, &model.config);
    for (n, (qk, v, gu)) in super::layer_widths(model).into_iter().enumerate() {
        ck.set(&format!("layers.{n}.k_qk"), qk);
        ck.set(&format!("layers.{n}.k_v"), v);
        ck.set(&format!("layers.{n}.k_gu"), gu);
    }
    for (name, t) in model.named_tensors() {
        ck.push(name, t);
    }
    ck
}

/// Loads a model checkpoint; shapes are checked before anything is returned.
pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<Model<T>> {
    if ck.get("kind") != Some("model") {
        return Err(Error::Format { offset: 0, message: "checkpoint does not hold a model".into() });
    }
    let config = read_model_config(ck)?;
    let layers = (0..config.n_layers)
        .map(|n| {
            Ok(DecoderLayer {
                attn_norm: ck.tensor(&format!("layers.{n}.attn_norm"))?,
                mlp_norm: ck.tensor(&format!("layers.{n}.mlp_norm"))?,
                proj: Role::ALL
                    .iter()
                    .map(|r| ck.tensor(&format!("layers.{n}.{}", r.name())))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model {
        tok_emb: ck.tensor("tok_emb")?,
        pos_emb: ck.tensor("pos_emb")?,
        layers,
        final_norm: ck.tensor("final_norm")?,
        unembed: ck.tensor("unembed")?,
        config,
    };
    model.validate()?;
    for (n, w) in super::layer_widths(&model).into_iter().enumerate() {
        let recorded: (usize, usize, usize) = (
            ck.require(&format!("layers.{n}.k_qk"))?,
            ck.require(&format!("layers.{n}.k_v"))?,
            ck.require(&format!("layers.{n}.k_gu"))?,
        );
        if recorded != w {
            return Err(Error::Format {
                offset: 0,
                message: format!("layer {n}: recorded widths {recorded:?} but tensors have {w:?}"),
            });
        }
    }
    Ok(model)
}

pub fn adapters_checkpoint<T: Scalar>(adapters: &Adapters<T>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set("kind", "adapters");
    ck.set("rank", adapters.rank);
    ck.set("n_layers", adapters.layers.len());
    for (n, layer) in adapters.layers.iter().enumerate() {
        for role in Role::ALL {
            let f = &layer[role.index()];
            ck.push(format!("adapters.{n}.{}.a", role.name()), &f.a);
            ck.push(format!("adapters.{n}.{}.b", role.name()), &f.b);
        }
    }
    ck
}

pub fn adapters_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<Adapters<T>> {
    if ck.get("kind") != Some("adapters") {
        return Err(Error::Format { offset: 0, message: "checkpoint does not hold adapters".into() });
    }
    let rank: usize = ck.require("rank")?;
    let n_layers: usize = ck.require("n_layers")?;
    let layers = (0..n_layers)
        .map(|n| {
            Role::ALL
                .iter()
                .map(|r| {
                    let f = LoraFactors {
                        a: ck.tensor(&format!("adapters.{n}.{}.a", r.name()))?,
                        b: ck.tensor(&format!("adapters.{n}.{}.b", r.name()))?,
                    };
                    if f.a.cols() != rank || f.b.rows() != rank {
                        return Err(Error::Format {
                            offset: 0,
                            message: format!("adapter {n}.{} does not have rank {rank}", r.name()),
                        });
                    }
                    Ok(f)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Adapters { rank, layers })
}

/// Checks that `adapters` fit `model` projection by projection.
pub fn check_adapters_fit<T: Scalar>(model: &Model<T>, adapters: &Adapters<T>) -> Result<()> {
    let shapes = model.projection_shapes();
    if shapes.len() != adapters.layers.len() {
        return Err(Error::Contract(format!(
            "adapters have {} layers, model has {}",
            adapters.layers.len(),
            shapes.len()
        )));
    }
    for (n, layer) in adapters.layers.iter().enumerate() {
        for role in Role::ALL {
            let f = &layer[role.index()];
            if (f.a.rows(), f.b.cols()) != shapes[n][role.index()] {
                return Err(Error::Contract(format!(
                    "adapter {n}.{} is {}×{}, projection is {:?}",
                    role.name(),
                    f.a.rows(),
                    f.b.cols(),
                    shapes[n][role.index()]
                )));
            }
        }
    }
    Ok(())
}
