//! Checkpoint serialization.
//!
//! Layout: magic `DSCKPT01`; u32 length + JSON metadata (model kind,
//! vocabulary, dimensions — anything the loader needs to rebuild the
//! architecture before reading weights); u32 parameter count; then per
//! parameter, sorted by name: u32 name length, name bytes, u32 ndim,
//! ndim × u32 dims, and the values as little-endian f64. Round-trips
//! are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParameterStore;

pub const CKPT_MAGIC: &[u8; 8] = b"DSCKPT01";

pub fn save_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    store: &ParameterStore,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    let meta_bytes = serde_json::to_vec(meta)?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(store.num_tensors() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(p.shape.0 as u32).to_le_bytes())?;
        w.write_all(&(p.shape.1 as u32).to_le_bytes())?;
        for v in &p.value {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParameterStore)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format_anon(format!(
            "bad checkpoint magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;

    let n_params = read_u32(&mut r)? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::format_anon(format!("checkpoint name not UTF-8: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim != 2 {
            return Err(Error::format_anon(format!(
                "parameter `{name}`: expected 2 dims, got {ndim}"
            )));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut value = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            value.push(f64::from_le_bytes(buf));
        }
        store.insert_raw(&name, (rows, cols), value);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format_anon("trailing bytes after checkpoint table"));
    }
    Ok((meta, store))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
