//! Binary checkpoint format.
//!
//! Layout: magic, format version, graph name, then an ordered table of
//! (parameter name, shape) entries, then each tensor's values as
//! little-endian f32 in row-major order. Reload is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::DnbpError;

const MAGIC: &[u8; 8] = b"DNBPCKPT";
const VERSION: u32 = 1;

pub fn save(path: &Path, graph_name: &str, store: &ParamStore) -> Result<(), DnbpError> {
    let file = File::create(path).map_err(|e| DnbpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, graph_name)?;
        w.write_all(&(store.len() as u32).to_le_bytes())?;
        for id in store.ids() {
            write_str(&mut w, store.name(id))?;
            write_str(&mut w, store.group_name(store.group_of(id)))?;
            let shape = store.tensor(id).shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for id in store.ids() {
            for &v in store.tensor(id).data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    out().map_err(|e| DnbpError::io(path, e))
}

/// Graph name recorded in a checkpoint header.
pub fn peek_graph_name(path: &Path) -> Result<String, DnbpError> {
    let file = File::open(path).map_err(|e| DnbpError::io(path, e))?;
    let mut r = BufReader::new(file);
    check_header(&mut r, path)?;
    read_str(&mut r).map_err(|e| DnbpError::io(path, e))
}

/// Load values into an already-constructed store. Every name and shape must
/// match the store exactly.
pub fn load_into(path: &Path, expected_graph: &str, store: &mut ParamStore) -> Result<(), DnbpError> {
    let file = File::open(path).map_err(|e| DnbpError::io(path, e))?;
    let mut r = BufReader::new(file);
    check_header(&mut r, path)?;
    let graph = read_str(&mut r).map_err(|e| DnbpError::io(path, e))?;
    if graph != expected_graph {
        return Err(DnbpError::Data(format!(
            "checkpoint {} was trained for graph {graph:?}, expected {expected_graph:?}",
            path.display()
        )));
    }
    let count = read_u32(&mut r).map_err(|e| DnbpError::io(path, e))? as usize;
    if count != store.len() {
        return Err(DnbpError::Data(format!(
            "checkpoint has {count} parameter tensors, model expects {}",
            store.len()
        )));
    }
    let mut order = Vec::with_capacity(count);
    for i in 0..count {
        let name = read_str(&mut r).map_err(|e| DnbpError::io(path, e))?;
        let _group = read_str(&mut r).map_err(|e| DnbpError::io(path, e))?;
        let ndim = read_u32(&mut r).map_err(|e| DnbpError::io(path, e))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r).map_err(|e| DnbpError::io(path, e))? as usize);
        }
        let id = store.by_name(&name).ok_or_else(|| {
            DnbpError::Data(format!("checkpoint parameter {name:?} not present in model"))
        })?;
        if store.tensor(id).shape() != shape.as_slice() {
            return Err(DnbpError::Data(format!(
                "checkpoint parameter {name:?} has shape {:?}, model expects {:?} (entry {i})",
                shape,
                store.tensor(id).shape()
            )));
        }
        order.push(id);
    }
    for id in order {
        let n = store.tensor(id).numel();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(|e| DnbpError::io(path, e))?;
        let data = store.tensor_mut(id).data_mut();
        for (k, chunk) in buf.chunks_exact(4).enumerate() {
            data[k] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    Ok(())
}

fn check_header<R: Read>(r: &mut R, path: &Path) -> Result<(), DnbpError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| DnbpError::io(path, e))?;
    if &magic != MAGIC {
        return Err(DnbpError::Data(format!("{} is not a checkpoint file", path.display())));
    }
    let version = read_u32(r).map_err(|e| DnbpError::io(path, e))?;
    if version != VERSION {
        return Err(DnbpError::Data(format!(
            "unsupported checkpoint version {version} (supported: {VERSION})"
        )));
    }
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
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
