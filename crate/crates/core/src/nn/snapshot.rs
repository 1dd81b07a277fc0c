//! `GFMK1` model snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GFMK1"
//! u32 metadata length, metadata bytes (UTF-8, opaque to this module)
//! u32 tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rank, u64 extents, f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{NnError, ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"GFMK1";

pub fn write_to<W: Write>(mut w: W, metadata: &str, store: &ParamStore) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&(metadata.len() as u32).to_le_bytes())?;
    w.write_all(metadata.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(metadata: &str, store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_to(&mut buf, metadata, store).expect("writing to memory cannot fail");
    buf
}

pub fn save(path: &Path, metadata: &str, store: &ParamStore) -> Result<(), NnError> {
    std::fs::write(path, to_bytes(metadata, store))?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String, NnError> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| NnError::Snapshot(format!("{what} is not UTF-8")))
}

fn truncated(e: std::io::Error) -> NnError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        NnError::Snapshot("truncated file".into())
    } else {
        NnError::Io(e)
    }
}

/// Returns the metadata string and the parameter tensors.
pub fn read_from<R: Read>(mut r: R) -> Result<(String, ParamStore), NnError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(NnError::Snapshot("missing GFMK1 header".into()));
    }
    let metadata = read_string(&mut r, "metadata")?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r, "tensor name")?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(truncated)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        store.insert(name, Tensor::new(&shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NnError::Snapshot("trailing bytes after last tensor".into()));
    }
    Ok((metadata, store))
}

pub fn load(path: &Path) -> Result<(String, ParamStore), NnError> {
    let bytes = std::fs::read(path)?;
    read_from(bytes.as_slice())
}
