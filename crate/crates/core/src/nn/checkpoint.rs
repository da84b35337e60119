//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "AGCN" | version u16 | stream tag u8 | class count u16
//! class names: (length u16, UTF-8 bytes)*
//! tensors until EOF: (name length u16, name UTF-8, rank u8, dims u32*, values f32*)
//! ```
//!
//! Architecture travels as two leading tensors, `meta.arch` (one row per
//! block: in, out, stride, kernel, embed, affinity flag) and `meta.input`
//! (channels, vertices), followed by the fixed `adjacency` stack and then
//! every parameter and running statistic.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::block::AgcnBlockConfig;
use super::model::{AgcnModel, ModelConfig, Stream};
use crate::error::{Error, Result};
use crate::graph::AdjacencyStack;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"AGCN";
pub const FORMAT_VERSION: u16 = 1;

const ARCH_COLUMNS: usize = 6;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u16(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| bad(format!("{what} {v} exceeds u16")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f64>) -> Result<()> {
    put_u16(out, name.len(), "name length")?;
    out.extend_from_slice(name.as_bytes());
    out.push(u8::try_from(t.rank()).map_err(|_| bad("rank exceeds u8"))?);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes<F: Real>(model: &AgcnModel<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.stream.tag());
    put_u16(&mut out, model.classes.len(), "class count")?;
    for c in &model.classes {
        put_u16(&mut out, c.len(), "class name length")?;
        out.extend_from_slice(c.as_bytes());
    }
    let cfg = &model.config;
    let arch: Vec<f64> = cfg
        .blocks
        .iter()
        .flat_map(|b| {
            [
                b.in_channels,
                b.out_channels,
                b.temporal_stride,
                b.temporal_kernel,
                b.embed_channels,
                usize::from(b.adaptive_affinity),
            ]
        })
        .map(|v| v as f64)
        .collect();
    put_tensor(&mut out, "meta.arch", &Tensor::new(&[cfg.blocks.len(), ARCH_COLUMNS], arch)?)?;
    let input = vec![cfg.in_channels as f64, cfg.vertex_count as f64];
    put_tensor(&mut out, "meta.input", &Tensor::new(&[2], input)?)?;
    put_tensor(&mut out, "adjacency", model.adjacency.tensor())?;
    let mut result = Ok(());
    model.visit(&mut |name, _, t| {
        if result.is_ok() {
            result = put_tensor(&mut out, &name, &t.cast());
        }
    });
    result.map(|_| out)
}

pub fn write<F: Real, W: Write>(model: &AgcnModel<F>, mut w: W) -> Result<()> {
    let bytes = to_bytes(model)?;
    w.write_all(&bytes).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn save<F: Real>(model: &AgcnModel<F>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn from_bytes<F: Real>(bytes: &[u8]) -> Result<AgcnModel<F>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(bad("missing AGCN magic"));
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let stream = Stream::from_tag(cur.u8()?).ok_or_else(|| bad("unknown stream tag"))?;
    let class_count = cur.u16()? as usize;
    let classes = (0..class_count).map(|_| cur.string()).collect::<Result<Vec<_>>>()?;

    let mut tensors: HashMap<String, Tensor<F>> = HashMap::new();
    let mut order = Vec::new();
    while !cur.done() {
        let name = cur.string()?;
        let rank = cur.u8()? as usize;
        let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| F::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        let t = Tensor::new(&dims, values).map_err(|e| bad(format!("{name}: {e}")))?;
        order.push(name.clone());
        if tensors.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {name:?}")));
        }
    }

    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name:?}")));
    let arch = take("meta.arch")?;
    let input = take("meta.input")?;
    let adjacency = take("adjacency")?;
    let as_usize = |v: F| v.to_usize().ok_or_else(|| bad("invalid architecture value"));
    if arch.rank() != 2 || arch.shape()[1] != ARCH_COLUMNS || input.numel() != 2 {
        return Err(bad("malformed architecture tensors"));
    }
    let blocks = arch
        .data()
        .chunks(ARCH_COLUMNS)
        .map(|row| {
            Ok(AgcnBlockConfig {
                in_channels: as_usize(row[0])?,
                out_channels: as_usize(row[1])?,
                temporal_stride: as_usize(row[2])?,
                temporal_kernel: as_usize(row[3])?,
                embed_channels: as_usize(row[4])?,
                adaptive_affinity: row[5] != F::zero(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        in_channels: as_usize(input.data()[0])?,
        vertex_count: as_usize(input.data()[1])?,
        num_classes: class_count,
        blocks,
    };
    let adjacency = AdjacencyStack::from_tensor(adjacency.cast()).ok_or_else(|| bad("malformed adjacency"))?;
    let mut model = AgcnModel::new(config, classes, stream, adjacency, 0).map_err(|e| bad(e.to_string()))?;
    let mut result = Ok(());
    model.visit_mut(&mut |name, _, slot| {
        if result.is_err() {
            return;
        }
        match tensors.remove(&name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                result = Err(bad(format!(
                    "{name}: shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => result = Err(bad(format!("missing tensor {name:?}"))),
        }
    });
    result?;
    if let Some(extra) = order.iter().find(|n| tensors.contains_key(*n)) {
        return Err(bad(format!("unexpected tensor {extra:?}")));
    }
    Ok(model)
}

pub fn read<F: Real, R: Read>(mut r: R) -> Result<AgcnModel<F>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    from_bytes(&bytes)
}

pub fn load<F: Real>(path: &Path) -> Result<AgcnModel<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::in_file(path, e))
}
