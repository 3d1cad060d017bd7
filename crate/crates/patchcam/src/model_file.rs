//! `.pcam` network files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PCAMNET1"  u32 version=1
//! u32 class count, then per class: u32 byte length + UTF-8 name
//! u32 channels, u32 height, u32 width
//! u32 layer count, then layer records
//! ```
//!
//! A layer record is `u8 tag, f32 lr_factor, u8 frozen` followed by a
//! payload: Conv3x3 (tag 1) `u32 out, u32 in, kernel f32s, bias f32s`;
//! Dense (6) `u32 rows, u32 cols, weight f32s, bias f32s`; Residual (4)
//! `u32 count` and nested records; ReLU (2), MaxPool2x2 (3), GAP (5) and
//! Softmax (7) carry nothing. Weights are narrowed to f32 on save.

use std::fs;
use std::path::Path;

use patchcam_core::{InputSpec, Layer, LayerKind, Network, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PCAMNET1";
pub const VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_MAXPOOL: u8 = 3;
const TAG_RESIDUAL: u8 = 4;
const TAG_GAP: u8 = 5;
const TAG_DENSE: u8 = 6;
const TAG_SOFTMAX: u8 = 7;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_layer(out: &mut Vec<u8>, layer: &Layer) {
    let tag = match &layer.kind {
        LayerKind::Conv3x3 { .. } => TAG_CONV,
        LayerKind::Relu => TAG_RELU,
        LayerKind::MaxPool2x2 => TAG_MAXPOOL,
        LayerKind::Residual(_) => TAG_RESIDUAL,
        LayerKind::GlobalAvgPool => TAG_GAP,
        LayerKind::Dense { .. } => TAG_DENSE,
        LayerKind::SoftmaxOutput => TAG_SOFTMAX,
    };
    out.push(tag);
    out.extend_from_slice(&(layer.lr_factor as f32).to_le_bytes());
    out.push(u8::from(layer.frozen));
    match &layer.kind {
        LayerKind::Conv3x3 { kernel, bias } => {
            put_u32(out, kernel.shape()[0]);
            put_u32(out, kernel.shape()[1]);
            put_f32s(out, kernel);
            put_f32s(out, bias);
        }
        LayerKind::Dense { weight, bias } => {
            put_u32(out, weight.shape()[0]);
            put_u32(out, weight.shape()[1]);
            put_f32s(out, weight);
            put_f32s(out, bias);
        }
        LayerKind::Residual(nested) => {
            put_u32(out, nested.len());
            for inner in nested {
                put_layer(out, inner);
            }
        }
        _ => {}
    }
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, net.class_names.len());
    for name in &net.class_names {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
    }
    let spec = net.input_spec;
    for v in [spec.channels, spec.height, spec.width] {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, net.layers.len());
    for layer in &net.layers {
        put_layer(&mut out, layer);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

pub type Parse<T> = std::result::Result<T, String>;

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Parse<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated file at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Parse<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Parse<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Parse<f64> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Parse<Tensor> {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n <= self.bytes.len()).ok_or("tensor larger than file")?;
        let data = (0..n).map(|_| self.f32()).collect::<Parse<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }

    fn layer(&mut self, depth: usize) -> Parse<Layer> {
        if depth > 16 {
            return Err("residual nesting too deep".into());
        }
        let tag = self.u8()?;
        let lr_factor = self.f32()?;
        let frozen = match self.u8()? {
            0 => false,
            1 => true,
            b => return Err(format!("invalid frozen flag {b}")),
        };
        let kind = match tag {
            TAG_CONV => {
                let (o, i) = (self.u32()?, self.u32()?);
                let kernel = self.tensor(vec![o, i, 3, 3])?;
                let bias = self.tensor(vec![o])?;
                LayerKind::Conv3x3 { kernel, bias }
            }
            TAG_RELU => LayerKind::Relu,
            TAG_MAXPOOL => LayerKind::MaxPool2x2,
            TAG_RESIDUAL => {
                let n = self.u32()?;
                let nested = (0..n).map(|_| self.layer(depth + 1)).collect::<Parse<Vec<_>>>()?;
                LayerKind::Residual(nested)
            }
            TAG_GAP => LayerKind::GlobalAvgPool,
            TAG_SOFTMAX => LayerKind::SoftmaxOutput,
            TAG_DENSE => {
                let (r, c) = (self.u32()?, self.u32()?);
                let weight = self.tensor(vec![r, c])?;
                let bias = self.tensor(vec![r])?;
                LayerKind::Dense { weight, bias }
            }
            t => return Err(format!("unknown layer tag {t}")),
        };
        Ok(Layer {
            kind,
            lr_factor,
            frozen,
        })
    }
}

pub fn decode(bytes: &[u8]) -> Parse<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err("bad magic (not a .pcam model file)".into());
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let k = r.u32()?;
    let mut class_names = Vec::new();
    for _ in 0..k {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "class name is not UTF-8")?;
        class_names.push(name.to_string());
    }
    let input_spec = InputSpec {
        channels: r.u32()?,
        height: r.u32()?,
        width: r.u32()?,
    };
    let n = r.u32()?;
    let layers = (0..n).map(|_| r.layer(0)).collect::<Parse<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Network::new(layers, input_spec, class_names).map_err(|e| e.to_string())
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}
