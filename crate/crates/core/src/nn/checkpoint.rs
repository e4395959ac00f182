//! Binary checkpoints.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "MXCN" | version u32 (=1) | tensor count u32 |
//!   per tensor: rank u32 | dims u32 × rank | payload f64 × product(dims)
//! ```
//!
//! Tensors appear in layer order, weight before bias. The file carries no
//! architecture; loading validates against a caller-supplied spec.

use std::fs;
use std::path::Path;

use super::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXCN";
const VERSION: u32 = 1;

pub fn write_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + net.param_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let tensors: Vec<&Tensor> = net.param_tensors().collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(net))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses the raw tensor list.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected MXCN".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(len) = len.filter(|&l| l > 0 && rank > 0) else {
            return Err(Error::Format {
                offset: at,
                msg: format!("invalid tensor dimensions {dims:?}"),
            });
        };
        let payload = r.take(len.saturating_mul(8), "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after last tensor".into(),
        });
    }
    Ok(tensors)
}

pub fn load_checkpoint(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<Network> {
    let mut tensors = read_checkpoint(&fs::read(path)?)?.into_iter();
    let mut params = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let shapes = layer.param_shapes();
        let mut group = Vec::with_capacity(shapes.len());
        for s in shapes {
            let t = tensors.next().ok_or_else(|| Error::Shape {
                layer: i,
                msg: "checkpoint has too few tensors".into(),
            })?;
            if t.shape() != s.as_slice() {
                return Err(Error::Shape {
                    layer: i,
                    msg: format!("checkpoint tensor {:?}, spec wants {s:?}", t.shape()),
                });
            }
            group.push(t);
        }
        params.push(group);
    }
    if tensors.next().is_some() {
        return Err(Error::Shape {
            layer: spec.layers.len(),
            msg: "checkpoint has more tensors than the spec".into(),
        });
    }
    Network::from_params(spec.clone(), params)
}
