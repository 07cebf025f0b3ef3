//! Binary checkpoint encoding for model parameters.
//!
//! Layout: magic `LITR`, u32 LE version (1), u32 LE tensor count, then per
//! tensor: u32 name length, UTF-8 name, u32 rank, rank u64 LE dims, and the
//! values as 32-bit LE floats in row-major order. Tensors are written in
//! registry order, so identical parameters give byte-identical files.
//!
//! The decoder validates every length against the remaining input before
//! allocating, so hostile or truncated files fail fast instead of OOMing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Real;

pub const MAGIC: &[u8; 4] = b"LITR";
pub const VERSION: u32 = 1;

/// Caps that keep the decoder's allocations proportional to input size.
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(ckpt.tensors.len())
        .map_err(|_| Error::CheckpointFormat("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in &ckpt.tensors {
        let name_len = u32::try_from(t.name.len())
            .ok()
            .filter(|&l| l <= MAX_NAME_LEN)
            .ok_or_else(|| Error::CheckpointFormat(format!("name too long: {}", t.name.len())))?;
        let rank = u32::try_from(t.dims.len())
            .ok()
            .filter(|&r| r <= MAX_RANK)
            .ok_or_else(|| Error::CheckpointFormat(format!("rank too large: {}", t.dims.len())))?;
        let expect: u128 = t.dims.iter().map(|&d| d as u128).product();
        if expect != t.values.len() as u128 {
            return Err(Error::CheckpointFormat(format!(
                "tensor {:?}: dims {:?} imply {expect} values, have {}",
                t.name,
                t.dims,
                t.values.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&rank.to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::CheckpointFormat(format!(
                    "truncated reading {what}: need {len} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::CheckpointFormat("bad magic, not a LITR checkpoint".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let name_len = c.u32("name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::CheckpointFormat(format!("tensor {i}: name length {name_len} exceeds cap")));
        }
        let name = std::str::from_utf8(c.take(name_len as usize, "name")?)
            .map_err(|_| Error::CheckpointFormat(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = c.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::CheckpointFormat(format!("tensor {name:?}: rank {rank} exceeds cap")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(c.u64("dim")?);
        }
        let elems: u128 = dims.iter().map(|&d| d as u128).product();
        let need = elems.checked_mul(4).ok_or_else(|| {
            Error::CheckpointFormat(format!("tensor {name:?}: dims {dims:?} overflow"))
        })?;
        if need > c.remaining() as u128 {
            return Err(Error::CheckpointFormat(format!(
                "tensor {name:?}: dims {dims:?} claim {elems} values but only {} payload bytes remain",
                c.remaining()
            )));
        }
        let raw = c.take(need as usize, "values")?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push(TensorEntry { name, dims, values });
    }
    if c.remaining() != 0 {
        return Err(Error::CheckpointFormat(format!("{} trailing bytes after last tensor", c.remaining())));
    }
    Ok(Checkpoint { tensors })
}

pub fn write_file(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode(ckpt)?)?)
}

pub fn read_file(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Snapshot of a model's parameters, in registry order.
pub fn from_model<F: Real>(model: &Model<F>) -> Checkpoint {
    let tensors = model
        .params
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            dims: p.tensor.shape.iter().map(|&d| d as u64).collect(),
            values: p.tensor.data.iter().map(|&v| Real::to_f64(v) as f32).collect(),
        })
        .collect();
    Checkpoint { tensors }
}

/// Overwrites `model`'s parameters from a checkpoint. Tensor names, order,
/// and shapes must match the model's registry exactly.
pub fn load_into_model<F: Real>(ckpt: &Checkpoint, model: &mut Model<F>) -> Result<()> {
    if ckpt.tensors.len() != model.params.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} tensors, model expects {}",
            ckpt.tensors.len(),
            model.params.len()
        )));
    }
    for (t, p) in ckpt.tensors.iter().zip(model.params.iter()) {
        if t.name != p.name {
            return Err(Error::CheckpointMismatch(format!(
                "tensor name {:?} does not match expected {:?}",
                t.name, p.name
            )));
        }
        let want: Vec<u64> = p.tensor.shape.iter().map(|&d| d as u64).collect();
        if t.dims != want {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {:?}: dims {:?} do not match expected {:?}",
                t.name, t.dims, want
            )));
        }
    }
    for (t, p) in ckpt.tensors.iter().zip(model.params.iter_mut()) {
        for (dst, &src) in p.tensor.data.iter_mut().zip(&t.values) {
            *dst = crate::tape::real(src as f64);
        }
    }
    Ok(())
}

pub fn save_model<F: Real>(model: &Model<F>, path: &Path) -> Result<()> {
    write_file(&from_model(model), path)
}

pub fn load_model<F: Real>(path: &Path, model: &mut Model<F>) -> Result<()> {
    load_into_model(&read_file(path)?, model)
}
