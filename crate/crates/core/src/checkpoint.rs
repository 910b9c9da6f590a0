//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CRFK" | u32 version | u64 header length | header JSON
//! then per tensor: u32 name length | name bytes | u32 rank | u64 extents… | f32 values…
//! ```
//!
//! The header holds the configuration, the optimizer step and the tensor
//! count. Parameters come first in store order, followed by the Adam first
//! and second moments under `adam.m/<name>` and `adam.v/<name>`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamId;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CRFK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    step: u64,
    tensors: usize,
}

/// Everything needed to resume or evaluate a run, stored at 32-bit
/// precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub params: Vec<(String, Tensor<f32>)>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &Model<T>, optimizer: &Adam<T>) -> Self {
        Self {
            config: model.config.clone(),
            params: model
                .params
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.cast()))
                .collect(),
            m: optimizer.m.iter().map(Tensor::cast).collect(),
            v: optimizer.v.iter().map(Tensor::cast).collect(),
            step: optimizer.step,
        }
    }

    /// Rebuilds the model (and optimizer state) from the stored values.
    pub fn restore<T: Scalar>(&self) -> Result<(Model<T>, Adam<T>)> {
        let mut model = Model::<T>::new(&self.config)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, the configured model {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (i, (name, t)) in self.params.iter().enumerate() {
            let id = ParamId(i);
            if model.params.name(id) != name {
                return Err(Error::Format(format!(
                    "parameter {i} is {name}, expected {}",
                    model.params.name(id)
                )));
            }
            model.params.set(id, t.cast())?;
        }
        let mut adam = Adam::new(&model.params);
        for i in 0..self.params.len() {
            if self.m[i].shape() != adam.m[i].shape() || self.v[i].shape() != adam.v[i].shape() {
                return Err(Error::Format(format!("moment shapes differ for {}", self.params[i].0)));
            }
            adam.m[i] = self.m[i].cast();
            adam.v[i] = self.v[i].cast();
        }
        adam.step = self.step;
        Ok((model, adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            tensors: self.params.len() * 3,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let moments = |prefix: &str, ts: &[Tensor<f32>]| -> Vec<(String, Tensor<f32>)> {
            self.params
                .iter()
                .zip(ts)
                .map(|((n, _), t)| (format!("{prefix}/{n}"), t.clone()))
                .collect()
        };
        let records = self
            .params
            .iter()
            .cloned()
            .chain(moments("adam.m", &self.m))
            .chain(moments("adam.v", &self.v));
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32_at(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64_at(&mut r)? as usize;
        if len > r.len() {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        header.config.validate()?;
        if !header.tensors.is_multiple_of(3) {
            return Err(Error::Format("tensor count is not a multiple of three".into()));
        }
        let mut records = Vec::with_capacity(header.tensors);
        for _ in 0..header.tensors {
            let n = u32_at(&mut r)? as usize;
            let mut name = vec![0u8; n];
            read(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = u32_at(&mut r)? as usize;
            let shape = (0..rank).map(|_| u64_at(&mut r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(4) > r.len() {
                return Err(Error::Format(format!("truncated data for {name}")));
            }
            let data = r[..numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[numel * 4..];
            records.push((name, Tensor::new(&shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        let k = header.tensors / 3;
        let v: Vec<Tensor<f32>> = records.drain(2 * k..).map(|(_, t)| t).collect();
        let m: Vec<Tensor<f32>> = records.drain(k..).map(|(_, t)| t).collect();
        Ok(Self {
            config: header.config,
            params: records,
            m,
            v,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of checkpoint".into()))
}

fn u32_at(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_at(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
