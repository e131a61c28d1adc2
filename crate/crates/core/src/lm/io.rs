//! Checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes   "PREFGATE"
//! version      u32       1
//! arch         6 × u32   vocab, d_model, n_heads, ffn_hidden, n_layers, max_len
//! n_tensors    u32
//! per tensor:
//!   name_len   u32, then name_len bytes of UTF-8
//!   rank       u32, then rank × u64 dims
//!   data       product(dims) × f64, row-major
//! ```
//!
//! Tensors appear in the canonical order of `ModelParams::tensors`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::{ArchConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PREFGATE";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params(params: &ModelParams, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let a = &params.arch;
    for field in [a.vocab, a.d_model, a.n_heads, a.ffn_hidden, a.n_layers, a.max_len] {
        out.write_all(&(field as u32).to_le_bytes())?;
    }
    let tensors = params.tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &dim in &t.shape {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + 8 * params.num_params());
    write_params(params, &mut buf).expect("writing to a Vec cannot fail");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::data(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, validating every tensor against the architecture
/// recorded in its header.
pub fn read_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic)"));
    }
    let version = cur.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut fields = [0usize; 6];
    for f in fields.iter_mut() {
        *f = cur.u32("architecture header")? as usize;
    }
    let arch = ArchConfig {
        vocab: fields[0],
        d_model: fields[1],
        n_heads: fields[2],
        ffn_hidden: fields[3],
        n_layers: fields[4],
        max_len: fields[5],
    };
    arch.validate()
        .map_err(|e| Error::data(format!("checkpoint header: {e}")))?;

    let mut params = ModelParams::zeros(&arch);
    let n_tensors = cur.u32("tensor count")? as usize;
    let expected = params.tensors().len();
    if n_tensors != expected {
        return Err(Error::data(format!(
            "checkpoint holds {n_tensors} tensors, architecture needs {expected}"
        )));
    }
    for (name, tensor) in params.tensors_mut() {
        let name_len = cur.u32("tensor name length")? as usize;
        let found = cur.take(name_len, "tensor name")?;
        if found != name.as_bytes() {
            return Err(Error::data(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(found)
            )));
        }
        let rank = cur.u32("tensor rank")? as usize;
        if rank > 4 {
            return Err(Error::data(format!("tensor {name}: implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| cur.u64("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != tensor.shape {
            return Err(Error::data(format!(
                "tensor {name}: shape {dims:?} does not match header architecture {:?}",
                tensor.shape
            )));
        }
        let raw = cur.take(8 * tensor.len(), &format!("tensor {name} data"))?;
        for (v, chunk) in tensor.data.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::data(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    if !params.all_finite() {
        return Err(Error::data("checkpoint contains non-finite values"));
    }
    Ok(params)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_params(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint that must match `arch`; a mismatch names the first
/// tensor whose shape differs.
pub fn load_params_for(path: &Path, arch: &ArchConfig) -> Result<ModelParams> {
    let params = load_params(path)?;
    if params.arch == *arch {
        return Ok(params);
    }
    let wanted = ModelParams::zeros(arch);
    let found = params.tensors();
    let expected = wanted.tensors();
    for ((name, have), (_, want)) in found.iter().zip(&expected) {
        if have.shape != want.shape {
            return Err(Error::data(format!(
                "{}: tensor {name} has shape {:?}, expected {:?}",
                path.display(),
                have.shape,
                want.shape
            )));
        }
    }
    Err(Error::data(format!(
        "{}: architecture {:?} does not match expected {:?}",
        path.display(),
        params.arch,
        arch
    )))
}
