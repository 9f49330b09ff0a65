//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "LRRN"  version:u32  L:u32  gamma:f64
//! per layer:
//!   d_out:u32  d_in:u32  beta:f64  tag:u8 (0 linear, 1 nonneg, 2 box)  [lo:f64 hi:f64 if box]
//!   W: d_out*d_in f64, row-major    b: d_out f64    c: d_in f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::energy::{ConstraintKind, LayerParams, ModelParams};
use crate::error::{LrrnError, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"LRRN";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.depth() as u32).to_le_bytes());
    out.extend_from_slice(&params.gamma.to_le_bytes());
    for (layer, cons) in params.layers.iter().zip(&params.constraints) {
        out.extend_from_slice(&(layer.d_out() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.d_in() as u32).to_le_bytes());
        out.extend_from_slice(&layer.beta.to_le_bytes());
        match *cons {
            ConstraintKind::Linear => out.push(0),
            ConstraintKind::NonNeg => out.push(1),
            ConstraintKind::Box { lo, hi } => {
                out.push(2);
                out.extend_from_slice(&lo.to_le_bytes());
                out.extend_from_slice(&hi.to_le_bytes());
            }
        }
        for v in layer.w.as_slice().iter().chain(&layer.b).chain(&layer.c) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
            .ok_or_else(|| LrrnError::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| LrrnError::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(LrrnError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(LrrnError::Checkpoint(format!("unsupported version {version}")));
    }
    let depth = cur.u32()? as usize;
    let gamma = cur.f64()?;
    let mut layers = Vec::with_capacity(depth.min(1024));
    let mut constraints = Vec::with_capacity(depth.min(1024));
    for k in 0..depth {
        let d_out = cur.u32()? as usize;
        let d_in = cur.u32()? as usize;
        let beta = cur.f64()?;
        let cons = match cur.u8()? {
            0 => ConstraintKind::Linear,
            1 => ConstraintKind::NonNeg,
            2 => ConstraintKind::Box { lo: cur.f64()?, hi: cur.f64()? },
            t => return Err(LrrnError::Checkpoint(format!("layer {k}: unknown constraint tag {t}"))),
        };
        let w = Matrix::from_vec(d_out, d_in, cur.f64_vec(d_out * d_in)?)?;
        let b = cur.f64_vec(d_out)?;
        let c = cur.f64_vec(d_in)?;
        layers.push(LayerParams::new(w, b, c, beta));
        constraints.push(cons);
    }
    if cur.pos != bytes.len() {
        return Err(LrrnError::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    ModelParams::new(layers, constraints, gamma)
}

pub fn write_to(params: &ModelParams, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(params))?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path)?)
}
