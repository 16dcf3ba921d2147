//! Binary container for named tensors and quantized layers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PEFTKIT\0"
//! version    u32
//! manifest   u32 length + UTF-8 JSON
//! dense      u32 count, then per record:
//!              u32 name length + name
//!              u8  precision tag (4 = f32, 8 = f64)
//!              u8  requires_grad
//!              u32 rank, rank × u64 dims
//!              raw little-endian values
//! quantized  u32 count, then per record:
//!              u32 name length + name
//!              u64 d_out, u64 d_in, u64 block size, u64 absmax group size
//!              u64 length + packed 4-bit codes
//!              u64 length + absmax codes
//!              u64 groups, groups × f64 scale, groups × f64 offset
//!              u8 has_bias, then d_out × f64 when set
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::quant::QuantizedLinear;
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"PEFTKIT\0";
pub const FORMAT_VERSION: u32 = 1;

/// A stored tensor in its original precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::PRECISION {
            Precision::Single => AnyTensor::F32(t.cast()),
            Precision::Double => AnyTensor::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub manifest: Value,
    pub tensors: BTreeMap<String, AnyTensor>,
    pub quantized: BTreeMap<String, QuantizedLinear>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    f64::write_le(v, out);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {} of {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("bad UTF-8: {e}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format("length overflow".into()))?;
        Ok(f64::read_le(self.take(bytes)?))
    }
}

impl Checkpoint {
    pub fn new(manifest: Value) -> Self {
        Self {
            manifest,
            ..Default::default()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_str(&mut out, &self.manifest.to_string());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            let (tag, rg, shape) = match t {
                AnyTensor::F32(t) => (4u8, t.requires_grad(), t.shape()),
                AnyTensor::F64(t) => (8u8, t.requires_grad(), t.shape()),
            };
            out.push(tag);
            out.push(rg as u8);
            put_u32(&mut out, shape.len() as u32);
            for &d in shape {
                put_u64(&mut out, d as u64);
            }
            match t {
                AnyTensor::F32(t) => f32::write_le(t.data(), &mut out),
                AnyTensor::F64(t) => f64::write_le(t.data(), &mut out),
            }
        }
        put_u32(&mut out, self.quantized.len() as u32);
        for (name, q) in &self.quantized {
            put_str(&mut out, name);
            for v in [q.d_out, q.d_in, q.block_size, q.dq_block_size] {
                put_u64(&mut out, v as u64);
            }
            put_u64(&mut out, q.codes.len() as u64);
            out.extend_from_slice(&q.codes);
            put_u64(&mut out, q.absmax_codes.len() as u64);
            out.extend_from_slice(&q.absmax_codes);
            put_u64(&mut out, q.group_scale.len() as u64);
            put_f64s(&mut out, &q.group_scale);
            put_f64s(&mut out, &q.group_offset);
            match &q.bias {
                Some(b) => {
                    out.push(1);
                    put_f64s(&mut out, b);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Value = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let mut ck = Checkpoint::new(manifest);
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let tag = r.u8()?;
            let rg = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
            let prec = Precision::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("{name}: unknown precision tag {tag}")))?;
            let bytes = numel
                .checked_mul(prec as usize)
                .ok_or_else(|| Error::Format(format!("{name}: size overflows")))?;
            let raw = r.take(bytes)?;
            let t = match prec {
                Precision::Single => AnyTensor::F32(Tensor::new(shape, f32::read_le(raw))?.with_requires_grad(rg)),
                Precision::Double => AnyTensor::F64(Tensor::new(shape, f64::read_le(raw))?.with_requires_grad(rg)),
            };
            ck.tensors.insert(name, t);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let (d_out, d_in, b1, b2) = (r.len()?, r.len()?, r.len()?, r.len()?);
            let n = r.len()?;
            let codes = r.take(n)?.to_vec();
            let n = r.len()?;
            let absmax_codes = r.take(n)?.to_vec();
            let groups = r.len()?;
            let scale = r.f64s(groups)?;
            let offset = r.f64s(groups)?;
            let bias = match r.u8()? {
                0 => None,
                _ => Some(r.f64s(d_out)?),
            };
            let q = QuantizedLinear::from_parts(d_out, d_in, b1, b2, codes, absmax_codes, scale, offset, bias)
                .map_err(|e| Error::Format(format!("{name}: {e}")))?;
            ck.quantized.insert(name, q);
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last record",
                buf.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
