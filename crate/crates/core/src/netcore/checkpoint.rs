//! Flat binary parameter files.
//!
//! Layout (all integers `u32` little-endian):
//!
//! ```text
//! magic   b"IBMN"
//! version 1
//! n       number of layer widths
//! widths  n values
//! act     activation id (0 relu, 1 silu, 2 tanh)
//! params  f64 little-endian; per layer the weight (in x out, row-major) then the bias
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::{Activation, Layer, Mlp};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IBMN";
pub const VERSION: u32 = 1;

pub fn to_bytes(net: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * net.widths().len() + 8 * net.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.widths().len() as u32).to_le_bytes());
    for &w in net.widths() {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&net.activation().id().to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Mlp> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    if !(2..=1024).contains(&n) {
        return Err(Error::Checkpoint(format!("implausible layer count {n}")));
    }
    let widths = (0..n)
        .map(|_| c.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let act = c.u32()?;
    let activation =
        Activation::from_id(act).ok_or_else(|| Error::Checkpoint(format!("unknown activation id {act}")))?;
    let mut layers = Vec::with_capacity(n - 1);
    for w in widths.windows(2) {
        let weight = (0..w[0] * w[1]).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let bias = (0..w[1]).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(Layer {
            weight: Array2::from_shape_vec((w[0], w[1]), weight).expect("sized above"),
            bias: Array1::from(bias),
        });
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(Mlp::from_parts(widths, layers, activation))
}

pub fn save(net: &Mlp, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Mlp> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
