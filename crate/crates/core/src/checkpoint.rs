//! Flat binary model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//! `"SSPN"`, version, layer count, then per layer its name (length-prefixed
//! UTF-8) and block count, and per block its name, rank, dims and `f32`
//! values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Network, ParamBlock};
use crate::tensor::Element;

pub const MAGIC: &[u8; 4] = b"SSPN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointLayer {
    pub name: String,
    /// Byte offset of the layer record; zero for checkpoints built in memory.
    pub offset: u64,
    pub blocks: Vec<ParamBlock<f32>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<CheckpointLayer>,
}

impl Checkpoint {
    pub fn from_network<T: Element>(net: &Network<T>) -> Self {
        let layers = net
            .blocks()
            .into_iter()
            .map(|(name, blocks)| CheckpointLayer {
                name,
                offset: 0,
                blocks: blocks
                    .into_iter()
                    .map(|b| ParamBlock {
                        name: b.name,
                        dims: b.dims,
                        values: b.values.iter().map(|v| v.as_f64() as f32).collect(),
                    })
                    .collect(),
            })
            .collect();
        Self { layers }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.layers.len() as u32);
        for layer in &self.layers {
            put_str(&mut out, &layer.name);
            put_u32(&mut out, layer.blocks.len() as u32);
            for b in &layer.blocks {
                put_str(&mut out, &b.name);
                put_u32(&mut out, b.dims.len() as u32);
                for &d in &b.dims {
                    put_u32(&mut out, d as u32);
                }
                for v in &b.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {magic:?}, expected \"SSPN\""),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut layers = Vec::new();
        for _ in 0..count {
            let offset = r.pos as u64;
            let name = r.string()?;
            let n_blocks = r.u32()?;
            let mut blocks = Vec::new();
            for _ in 0..n_blocks {
                let block_name = r.string()?;
                let rank = r.u32()?;
                let mut dims = Vec::new();
                for _ in 0..rank {
                    dims.push(r.u32()? as usize);
                }
                let len = dims
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| Error::format(r.pos as u64, "block size overflows"))?;
                let raw = r.take(
                    len.checked_mul(4)
                        .ok_or_else(|| Error::format(r.pos as u64, "block size overflows"))?,
                )?;
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                blocks.push(ParamBlock {
                    name: block_name,
                    dims,
                    values,
                });
            }
            layers.push(CheckpointLayer {
                name,
                offset,
                blocks,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored tensors into `net`. The layer list, tensor names and
    /// dims must match the network exactly.
    pub fn apply<T: Element>(&self, net: &mut Network<T>) -> Result<()> {
        let expected = net.blocks();
        if expected.len() != self.layers.len() {
            return Err(Error::format(
                0,
                format!(
                    "checkpoint has {} layers, model has {}",
                    self.layers.len(),
                    expected.len()
                ),
            ));
        }
        for ((name, blocks), layer) in expected.iter().zip(&self.layers) {
            let mismatch =
                |msg: String| Error::format(layer.offset, format!("layer {name}: {msg}"));
            if *name != layer.name {
                return Err(mismatch(format!("checkpoint stores layer {}", layer.name)));
            }
            if blocks.len() != layer.blocks.len() {
                return Err(mismatch(format!(
                    "expected {} tensors, checkpoint has {}",
                    blocks.len(),
                    layer.blocks.len()
                )));
            }
            for (e, b) in blocks.iter().zip(&layer.blocks) {
                if e.name != b.name || e.dims != b.dims {
                    return Err(mismatch(format!(
                        "expected `{}` {:?}, checkpoint has `{}` {:?}",
                        e.name, e.dims, b.name, b.dims
                    )));
                }
            }
        }
        for layer in &self.layers {
            let blocks: Vec<ParamBlock<T>> = layer
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    dims: b.dims.clone(),
                    values: b.values.iter().map(|&v| T::of(v as f64)).collect(),
                })
                .collect();
            net.load_blocks(&layer.name, &blocks)?;
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!(
                        "truncated: need {n} bytes, {} left",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, "name is not UTF-8"))
    }
}
