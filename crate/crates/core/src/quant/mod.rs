//! 4-bit NormalFloat (NF4) blockwise quantization of frozen weights.
//!
//! A weight matrix is split row-major into blocks of `B1` values. Each block
//! keeps its absolute maximum and one 4-bit code per value; codes index the
//! NF4 codebook and are packed two per byte, low nibble first. The per-block
//! absmax values are themselves quantized to 8 bits in groups of `B2` with an
//! affine min/max code (double quantization).

mod codebook;

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use codebook::{build_nf4_codebook, inverse_normal_cdf, Nf4Codebook};

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_DQ_BLOCK_SIZE: usize = 256;

/// Block sizes for [`quantize_linear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub block_size: usize,
    pub dq_block_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            dq_block_size: DEFAULT_DQ_BLOCK_SIZE,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.dq_block_size == 0 {
            return Err(Error::Config(format!(
                "quantization block sizes must be positive, got {} and {}",
                self.block_size, self.dq_block_size
            )));
        }
        Ok(())
    }
}

fn codebook() -> &'static Nf4Codebook {
    static BOOK: OnceLock<Nf4Codebook> = OnceLock::new();
    BOOK.get_or_init(build_nf4_codebook)
}

/// Quantizes one block against `book`: returns the codes and the block's
/// absolute maximum.
pub fn quantize_block(values: &[f64], book: &Nf4Codebook) -> Result<(Vec<u8>, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyAxis("cannot quantize an empty block".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("cannot quantize non-finite value {v}")));
    }
    let absmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if absmax == 0.0 {
        return Ok((vec![book.zero_index() as u8; values.len()], 0.0));
    }
    let codes = values
        .iter()
        .map(|&v| book.nearest(v / absmax) as u8)
        .collect();
    Ok((codes, absmax))
}

/// 8-bit affine codes for a list of non-negative absmax values, in groups of
/// `group_size`: `(codes, group_scale, group_offset)`.
pub fn double_quantize_absmax(absmaxes: &[f64], group_size: usize) -> (Vec<u8>, Vec<f64>, Vec<f64>) {
    assert!(group_size > 0, "group size must be positive");
    let mut codes = Vec::with_capacity(absmaxes.len());
    let mut scales = Vec::new();
    let mut offsets = Vec::new();
    for group in absmaxes.chunks(group_size) {
        let min = group.iter().copied().fold(f64::INFINITY, f64::min);
        let max = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = max - min;
        for &a in group {
            let code = if scale == 0.0 {
                0
            } else {
                ((a - min) / scale * 255.0).round().clamp(0.0, 255.0) as u8
            };
            codes.push(code);
        }
        scales.push(scale);
        offsets.push(min);
    }
    (codes, scales, offsets)
}

/// Inverse of [`double_quantize_absmax`].
pub fn dequantize_absmax(codes: &[u8], scales: &[f64], offsets: &[f64], group_size: usize) -> Vec<f64> {
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let g = i / group_size;
            offsets[g] + c as f64 / 255.0 * scales[g]
        })
        .collect()
}

/// Packs 4-bit codes two per byte, low nibble first.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|p| (p[0] & 0x0F) | (p.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

/// Unpacks `count` codes from [`pack_nibbles`] output.
pub fn unpack_nibbles(bytes: &[u8], count: usize) -> Vec<u8> {
    (0..count)
        .map(|i| {
            let b = bytes[i / 2];
            if i % 2 == 0 {
                b & 0x0F
            } else {
                b >> 4
            }
        })
        .collect()
}

/// A frozen weight matrix stored as NF4 codes with double-quantized scales.
#[derive(Debug, Clone)]
pub struct QuantizedLinear {
    pub d_out: usize,
    pub d_in: usize,
    pub block_size: usize,
    pub dq_block_size: usize,
    /// Packed 4-bit codes, row-major.
    pub codes: Vec<u8>,
    pub absmax_codes: Vec<u8>,
    pub group_scale: Vec<f64>,
    pub group_offset: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    dense: OnceLock<Vec<f64>>,
}

impl PartialEq for QuantizedLinear {
    fn eq(&self, o: &Self) -> bool {
        self.d_out == o.d_out
            && self.d_in == o.d_in
            && self.block_size == o.block_size
            && self.dq_block_size == o.dq_block_size
            && self.codes == o.codes
            && self.absmax_codes == o.absmax_codes
            && self.group_scale == o.group_scale
            && self.group_offset == o.group_offset
            && self.bias == o.bias
    }
}

/// Quantizes a `d_out×d_in` weight.
pub fn quantize_linear<T: Scalar>(
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cfg: QuantConfig,
) -> Result<QuantizedLinear> {
    cfg.validate()?;
    if w.ndim() != 2 {
        return Err(Error::shape("quantize_linear", w.shape(), &[2]));
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape("quantize_linear bias", b.shape(), &[d_out]));
        }
    }
    let values: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    let book = codebook();
    let mut codes = Vec::with_capacity(values.len());
    let mut absmax = Vec::with_capacity(values.len().div_ceil(cfg.block_size));
    for block in values.chunks(cfg.block_size) {
        let (c, a) = quantize_block(block, book)?;
        codes.extend(c);
        absmax.push(a);
    }
    let (absmax_codes, group_scale, group_offset) = double_quantize_absmax(&absmax, cfg.dq_block_size);
    Ok(QuantizedLinear {
        d_out,
        d_in,
        block_size: cfg.block_size,
        dq_block_size: cfg.dq_block_size,
        codes: pack_nibbles(&codes),
        absmax_codes,
        group_scale,
        group_offset,
        bias: bias.map(|b| b.data().iter().map(|v| v.as_f64()).collect()),
        dense: OnceLock::new(),
    })
}

impl QuantizedLinear {
    /// Rebuilds a layer from stored parts, checking their sizes agree.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        d_out: usize,
        d_in: usize,
        block_size: usize,
        dq_block_size: usize,
        codes: Vec<u8>,
        absmax_codes: Vec<u8>,
        group_scale: Vec<f64>,
        group_offset: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        QuantConfig {
            block_size,
            dq_block_size,
        }
        .validate()?;
        let n = d_out * d_in;
        let blocks = n.div_ceil(block_size);
        let groups = blocks.div_ceil(dq_block_size);
        let ok = codes.len() == n.div_ceil(2)
            && absmax_codes.len() == blocks
            && group_scale.len() == groups
            && group_offset.len() == groups
            && bias.as_ref().is_none_or(|b| b.len() == d_out);
        if !ok {
            return Err(Error::Format(format!(
                "inconsistent quantized layer {d_out}x{d_in}: {} code bytes, {} absmax codes, {} groups",
                codes.len(),
                absmax_codes.len(),
                group_scale.len()
            )));
        }
        Ok(Self {
            d_out,
            d_in,
            block_size,
            dq_block_size,
            codes,
            absmax_codes,
            group_scale,
            group_offset,
            bias,
            dense: OnceLock::new(),
        })
    }

    pub fn numel(&self) -> usize {
        self.d_out * self.d_in
    }

    pub fn num_blocks(&self) -> usize {
        self.numel().div_ceil(self.block_size)
    }

    pub fn config(&self) -> QuantConfig {
        QuantConfig {
            block_size: self.block_size,
            dq_block_size: self.dq_block_size,
        }
    }

    /// Unpacked 4-bit codes.
    pub fn unpacked_codes(&self) -> Vec<u8> {
        unpack_nibbles(&self.codes, self.numel())
    }

    /// Per-block absmax after double-quantization round trip.
    pub fn absmax(&self) -> Vec<f64> {
        dequantize_absmax(
            &self.absmax_codes,
            &self.group_scale,
            &self.group_offset,
            self.dq_block_size,
        )
    }

    /// Dense `d_out×d_in` reconstruction, cached after the first call.
    pub fn dequantized(&self) -> &[f64] {
        self.dense.get_or_init(|| {
            let book = codebook();
            let absmax = self.absmax();
            self.unpacked_codes()
                .iter()
                .enumerate()
                .map(|(i, &c)| book.values[c as usize] * absmax[i / self.block_size])
                .collect()
        })
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        let data = self.dequantized().iter().map(|&v| T::from_f64(v)).collect();
        Tensor::new([self.d_out, self.d_in], data).expect("shape matches codes")
    }

    /// Storage in bytes: packed codes, absmax codes and group metadata.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + self.absmax_codes.len() + 16 * self.group_scale.len()
    }

    /// `x[..., d_in] -> [..., d_out]` through the frozen weight. The weight
    /// enters the graph as a constant, so no gradient reaches it.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.constant(self.dequantize());
        let y = g.matmul_nt(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.constant(Tensor::new([self.d_out], b.iter().map(|&v| T::from_f64(v)).collect())?);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Plain-tensor form of [`QuantizedLinear::forward`] for `x[B×d_in]`.
pub fn quantized_forward<T: Scalar>(x: &Tensor<T>, q: &QuantizedLinear) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = q.forward(&mut g, xv)?;
    Ok(g.value(y).clone())
}
