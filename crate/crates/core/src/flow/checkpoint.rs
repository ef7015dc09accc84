//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "VSFT" | version | { name_len | name bytes | rank | dims[rank] | f32 data }*
//! ```
//!
//! The first tensor is always `meta.arch`, a rank-1 tensor holding
//! `[layers, heads, dim, patch, mlp_ratio, time_features]`. Parameter tensors
//! follow in [`ToyModel::tensors`] order. Values are stored as `f32`, so a
//! saved model reloads rounded to single precision; saving that reloaded model
//! again reproduces the file byte for byte.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::model::{ModelConfig, ToyModel};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"VSFT";
pub const VERSION: u32 = 1;
const ARCH: &str = "meta.arch";

pub fn to_bytes(model: &ToyModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = model.config;
    let arch: Vec<f64> = [c.layers, c.heads, c.dim, c.patch, c.mlp_ratio, c.time_features]
        .iter()
        .map(|&v| v as f64)
        .collect();
    write_tensor(&mut out, ARCH, &[arch.len()], &arch);
    for (name, t) in model.tensors() {
        write_tensor(&mut out, &name, &[t.rows(), t.cols()], t.data());
    }
    out
}

fn write_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ToyModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic; not a VSFT checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    while !cur.done() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = cur.take(count.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((name, dims, data));
    }

    let (first, rest) = tensors
        .split_first()
        .ok_or_else(|| Error::Format("checkpoint holds no tensors".into()))?;
    if first.0 != ARCH || first.2.len() != 6 {
        return Err(Error::Format(format!("expected {ARCH} first")));
    }
    let a: Vec<usize> = first.2.iter().map(|&v| v as usize).collect();
    let config = ModelConfig {
        layers: a[0],
        heads: a[1],
        dim: a[2],
        patch: a[3],
        mlp_ratio: a[4],
        time_features: a[5],
    };
    let mut model = ToyModel::init(config, 0)?;
    let mut by_name: HashMap<&str, (&Vec<usize>, &Vec<f64>)> = HashMap::new();
    for (name, dims, data) in rest {
        if by_name.insert(name.as_str(), (dims, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }
    let expected = model.tensors().len();
    if by_name.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint has {} parameter tensors, architecture needs {expected}",
            by_name.len()
        )));
    }
    for (name, t) in model.tensors_mut() {
        let (dims, data) = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
        if dims.as_slice() != [t.rows(), t.cols()] {
            return Err(Error::Format(format!(
                "tensor '{name}' has dims {dims:?}, expected [{}, {}]",
                t.rows(),
                t.cols()
            )));
        }
        *t = Matrix::new(t.rows(), t.cols(), data.to_vec())?;
    }
    Ok(model)
}

pub fn save(model: &ToyModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ToyModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
