//! Checkpoint format: a text index (name, offset, shape) followed by the
//! named tensors in the flat binary tensor encoding.

use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SASC";

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    let mut blobs: Vec<u8> = Vec::new();
    let mut index = String::new();
    for (name, tensor) in params.iter() {
        let offset = blobs.len();
        tensor
            .write_binary(&mut blobs)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        index.push_str(&format!("{name}\t{offset}\t{}\n", dims.join(" ")));
    }
    let mut out: Vec<u8> = Vec::with_capacity(blobs.len() + index.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(index.as_bytes());
    out.write_all(&blobs)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    std::fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes =
        std::fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let index_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 12 + index_len {
        return Err(CoreError::Checkpoint(format!(
            "{}: truncated index",
            path.display()
        )));
    }
    let index = std::str::from_utf8(&bytes[12..12 + index_len])
        .map_err(|_| CoreError::Checkpoint("index is not UTF-8".into()))?;
    let blobs = &bytes[12 + index_len..];
    let mut params = ParamSet::new();
    for line in index.lines() {
        let mut fields = line.split('\t');
        let (name, offset_s, shape_s) = match (fields.next(), fields.next(), fields.next()) {
            (Some(n), Some(o), Some(s)) => (n, o, s),
            _ => {
                return Err(CoreError::Checkpoint(format!(
                    "malformed index line: {line}"
                )))
            }
        };
        let offset: usize = offset_s
            .parse()
            .map_err(|_| CoreError::Checkpoint(format!("bad offset in: {line}")))?;
        if offset >= blobs.len() {
            return Err(CoreError::Checkpoint(format!(
                "offset {offset} beyond blob section"
            )));
        }
        let tensor = Tensor::read_binary(&mut &blobs[offset..])
            .map_err(|e| CoreError::Checkpoint(format!("{name}: {e}")))?;
        let dims: Vec<usize> = shape_s
            .split(' ')
            .map(|d| d.parse().unwrap_or(0))
            .collect();
        if tensor.shape() != dims.as_slice() {
            return Err(CoreError::Checkpoint(format!(
                "{name}: index shape {:?} disagrees with blob {:?}",
                dims,
                tensor.shape()
            )));
        }
        params.push(name, tensor);
    }
    Ok(params)
}
