//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SDLABCK1"
//! spec_len   u32      length of the JSON model descriptor
//! spec       bytes    UTF-8 JSON of the ModelSpec
//! n_seg      u32
//! per segment:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims u64 × ndim
//!   values   f64 × prod(dims), IEEE-754 bit patterns
//! ```

use std::fs;
use std::path::Path;

use super::{Model, ModelSpec};
use crate::diffcore::{ParameterVector, SegmentSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDLABCK1";

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let spec = serde_json::to_vec(model.spec())?;
    let params = model.params();
    let mut out = Vec::with_capacity(64 + spec.len() + 8 * params.total_dim());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(params.num_segments() as u32).to_le_bytes());
    for (i, seg) in params.segments().iter().enumerate() {
        out.extend_from_slice(&(seg.name.len() as u32).to_le_bytes());
        out.extend_from_slice(seg.name.as_bytes());
        out.extend_from_slice(&(seg.shape.len() as u32).to_le_bytes());
        for &d in &seg.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in params.segment(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let spec_len = r.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?)?;
    let n_seg = r.u32()? as usize;
    let mut segments = Vec::with_capacity(n_seg);
    let mut values = Vec::new();
    for _ in 0..n_seg {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("segment name: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        for _ in 0..n {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        segments.push(SegmentSpec { name, shape });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params = ParameterVector::from_flat(segments, values)?;
    Model::from_parts(spec, params)
}

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; the model comes back in eval mode.
pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
