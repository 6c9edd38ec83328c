//! Binary checkpoint format.
//!
//! ```text
//! magic    b"OLABCKPT"
//! version  u32 LE
//! meta     u32 LE length + UTF-8 JSON (model config, optimizer config and
//!          step, free-form training state)
//! params   tensor table
//! moments  tensor table (first then second moment per parameter; empty
//!          when no optimizer state is stored)
//!
//! tensor table: u32 count, then per tensor
//!   u32 name length, name bytes, u32 rank, rank × u64 dims,
//!   numel × f64 LE payload
//! ```
//!
//! Values are written as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"OLABCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    optimizer: Option<OptimizerMeta>,
    training: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    config: OptimizerConfig,
    step: u64,
}

/// Saved optimizer moments, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub config: OptimizerConfig,
    pub step: u64,
    /// `(name, m̄, v̄)` per parameter.
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl OptimizerSnapshot {
    pub fn capture(opt: &Optimizer) -> Result<Self> {
        let states = opt.states().ok_or(Error::Uninitialised)?;
        Ok(Self {
            config: opt.config().clone(),
            step: opt.step_count(),
            moments: states
                .iter()
                .map(|s| (s.name.clone(), s.m_bar.clone(), s.v_bar.clone()))
                .collect(),
        })
    }

    /// Rebuilds the optimizer, regenerating each transform from its seed.
    pub fn restore(&self, params: &ParamStore) -> Result<Optimizer> {
        let mut opt = Optimizer::new(self.config.clone())?;
        opt.restore(params, self.step, &self.moments)?;
        Ok(opt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerSnapshot>,
    /// Opaque training-loop state (run configuration, step, metrics).
    pub training: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            optimizer: None,
            training: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = Meta {
            model: self.model.config().clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config.clone(),
                step: o.step,
            }),
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        write_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);

        let params: Vec<(&str, &[usize], &[f64])> = self
            .model
            .params()
            .iter()
            .map(|(n, t)| (n, t.shape(), t.data()))
            .collect();
        write_table(&mut out, &params)?;

        let mut moments = Vec::new();
        let lens: Vec<[usize; 2]>;
        if let Some(o) = &self.optimizer {
            lens = o.moments.iter().map(|(_, m, v)| [m.len(), v.len()]).collect();
            for ((name, m, v), l) in o.moments.iter().zip(&lens) {
                moments.push((name.as_str(), &l[..1], m.as_slice()));
                moments.push((name.as_str(), &l[1..], v.as_slice()));
            }
        }
        write_table(&mut out, &moments)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let json = take(&mut r, len)?;
        let meta: Meta = serde_json::from_slice(json)?;

        let mut params = ParamStore::new();
        for (name, shape, data) in read_table(&mut r)? {
            params.insert(name, Tensor::new(&shape, data)?);
        }
        let model = Model::from_parts(meta.model, params)?;

        let table = read_table(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes".into()));
        }
        let optimizer = match meta.optimizer {
            None => None,
            Some(o) => {
                if table.len() % 2 != 0 {
                    return Err(Error::Format("odd moment table".into()));
                }
                let moments = table
                    .chunks(2)
                    .map(|pair| (pair[0].0.clone(), pair[0].2.clone(), pair[1].2.clone()))
                    .collect();
                Some(OptimizerSnapshot {
                    config: o.config,
                    step: o.step,
                    moments,
                })
            }
        };
        Ok(Self {
            model,
            optimizer,
            training: meta.training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format("length exceeds u32".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn write_table(out: &mut Vec<u8>, entries: &[(&str, &[usize], &[f64])]) -> Result<()> {
    write_u32(out, entries.len())?;
    for (name, shape, data) in entries {
        write_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        write_u32(out, shape.len())?;
        for &d in *shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}

type Entry = (String, Vec<usize>, Vec<f64>);

fn read_table(r: &mut &[u8]) -> Result<Vec<Entry>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let name = String::from_utf8(take(r, len)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = take(
            r,
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, shape, data));
    }
    Ok(out)
}
