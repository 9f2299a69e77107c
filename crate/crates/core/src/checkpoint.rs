//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `MSTD`, format version `u16`, then for every
//! parameter until end of file: name length `u16`, UTF-8 name, rank `u8`,
//! `rank` dimensions as `u32`, and the `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Parameter, Tensor};

pub const MAGIC: &[u8; 4] = b"MSTD";
pub const VERSION: u16 = 1;

pub fn encode<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::usage(format!("parameter name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::usage("rank exceeds 255"))?);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::usage("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.tensor.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let mut entries = Vec::new();
    while r.pos < buf.len() {
        let start = r.pos as u64;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(start + 2, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(r.pos as u64, "payload size overflow"))?,
            "payload",
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(start, e.to_string()))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save(path: &Path, module: &impl Module) -> Result<()> {
    let bytes = encode(module.params())?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copy named values into `module`. Every module parameter must be present
/// with a matching shape; extra entries are an error.
pub fn assign(module: &mut impl Module, entries: Vec<(String, Tensor)>) -> Result<()> {
    let mut map: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
    for p in module.params_mut() {
        let t = map
            .remove(&p.name)
            .ok_or_else(|| Error::format(0, format!("checkpoint lacks parameter `{}`", p.name)))?;
        p.copy_values_from(&t)
            .map_err(|e| Error::format(0, e.to_string()))?;
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::format(0, format!("unexpected parameter `{extra}` in checkpoint")));
    }
    Ok(())
}

pub fn load_into(path: &Path, module: &mut impl Module) -> Result<()> {
    assign(module, read(path)?)
}
