//! ESCK checkpoint files: an ordered manifest of named tensors followed by
//! raw little-endian f64 payloads.
//!
//! Layout: magic "ESCK v1" | u32 tensor count | per tensor (u16 name length,
//! UTF-8 name, u8 rank, u32 dims...) | u8 dtype tag (0 = f64) | payloads in
//! manifest order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 7] = b"ESCK v1";

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::contract(format!("parameter name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::contract("tensor rank exceeds the format limit"));
        }
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(0u8); // f64
    }
    for (_, tensor) in store.iter() {
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Every manifest entry as (name, shape, values).
pub fn read_checkpoint_raw(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let loc = || path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::parse(loc(), e.to_string()))?
        .read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes, &loc())
}

pub fn parse_checkpoint(bytes: &[u8], origin: &str) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<usize> {
        if *pos + n > bytes.len() {
            return Err(Error::parse(
                origin,
                format!("truncated while reading {what} at byte {pos}", pos = *pos),
            ));
        }
        let at = *pos;
        *pos += n;
        Ok(at)
    };
    let at = take(&mut pos, 7, "magic")?;
    if &bytes[at..at + 7] != MAGIC {
        return Err(Error::parse(
            origin,
            "bad magic, expected \"ESCK v1\"".to_string(),
        ));
    }
    let at = take(&mut pos, 4, "tensor count")?;
    let count = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;

    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for i in 0..count {
        let at = take(&mut pos, 2, "name length")?;
        let name_len = u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap()) as usize;
        let at = take(&mut pos, name_len, "name")?;
        let name = std::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| Error::parse(origin, format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let at = take(&mut pos, 1, "rank")?;
        let rank = bytes[at] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = take(&mut pos, 4, "dimension")?;
            shape.push(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize);
        }
        let at = take(&mut pos, 1, "dtype")?;
        if bytes[at] != 0 {
            return Err(Error::parse(
                origin,
                format!("entry {i} ({name}): unknown dtype tag {}", bytes[at]),
            ));
        }
        manifest.push((name, shape));
    }

    let mut out = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let numel: usize = shape.iter().product();
        let at = take(&mut pos, numel * 8, "payload")?;
        let values: Vec<f64> = bytes[at..at + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, values));
    }
    if pos != bytes.len() {
        return Err(Error::parse(
            origin,
            format!("{} trailing bytes after the last payload", bytes.len() - pos),
        ));
    }
    Ok(out)
}

/// Load a checkpoint into an existing store; names, order, and shapes must
/// match the model that produced it.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let entries = read_checkpoint_raw(path)?;
    if entries.len() != store.len() {
        return Err(Error::config(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, shape, values)) in ids.into_iter().zip(entries) {
        let expected_name = store.name_of(id);
        if expected_name != name {
            return Err(Error::config(format!(
                "checkpoint entry {name:?} does not match model parameter {expected_name:?}"
            )));
        }
        if store.get(id).shape() != shape.as_slice() {
            return Err(Error::config(format!(
                "checkpoint entry {name}: shape {:?} vs model {:?}",
                shape,
                store.get(id).shape()
            )));
        }
        store.set(id, Tensor::new(&shape, values)?.as_param());
    }
    Ok(())
}
