//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "LPCK"
//! version      u32      1
//! count        u64      number of entries
//! entry × count:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   ndim       u32
//!   dims       ndim × u64
//!   values     prod(dims) × f64
//! ```
//!
//! Optimizer and trainer state are stored as ordinary entries under reserved
//! name prefixes (see `training::Trainer::save_checkpoint`).

use std::io::{Read, Write};
use std::path::Path;

use super::graph::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LPCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_entries<W: Write>(mut w: W, entries: &[(&str, &Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r).map_err(fmt)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u64(&mut r).map_err(fmt)?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(fmt)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(fmt)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = read_u32(&mut r).map_err(fmt)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut r).map_err(fmt)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b).map_err(fmt)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    let entries: Vec<_> = params.iter().map(|(_, n, t)| (n, t)).collect();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_entries(std::io::BufWriter::new(f), &entries).map_err(|e| Error::io(path, e))
}

pub fn load_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_entries(std::io::BufReader::new(f))
}

/// Overwrites every parameter of `params` from `entries`; extra entries are
/// ignored, missing ones or shape mismatches are errors.
pub fn assign_params(params: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let Some((_, t)) = entries.iter().find(|(n, _)| *n == name) else {
            return Err(Error::Format(format!("checkpoint lacks parameter {name}")));
        };
        if t.shape() != params.get(id).shape() {
            return Err(Error::Dimension {
                op: "checkpoint",
                left: params.get(id).shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        *params.get_mut(id) = t.clone();
    }
    Ok(())
}
