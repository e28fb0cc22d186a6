//! Binary feature matrices: 8-byte magic, `u32` rank, `u64` dimensions,
//! then little-endian `f32` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_CACHE_MAGIC: [u8; 8] = *b"CGFEAT01";

pub fn write_feature_matrix(path: impl AsRef<Path>, dims: &[usize], values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    if dims.iter().product::<usize>() != values.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} do not match {} values",
            values.len()
        )));
    }
    let mut bytes = Vec::with_capacity(12 + 8 * dims.len() + 4 * values.len());
    bytes.extend_from_slice(&FEATURE_CACHE_MAGIC);
    bytes.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::InvalidArgument(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || bytes[..8] != FEATURE_CACHE_MAGIC {
        return Err(bad("not a feature cache file"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = bytes[12..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad("payload length does not match shape"));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, values))
}
