//! Weight files: `CHECKPOINT_MAGIC`, u32 version, u32 tensor count, then per
//! tensor a u32 rank, u64 dims and little-endian f32 values. Tensors appear
//! in the model's parameter order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use super::{check_shape, Param, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CGNNWT01";
const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, params: &[&Param<T>]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.as_standard_layout().iter() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<Tensor<f32>>> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a weight checkpoint".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("rank {rank} out of range")));
        }
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&k| k <= data.len() / 4)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {dims:?} too large")))?;
        let values = c
            .take(count * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(Tensor::from_shape_vec(IxDyn(&dims), values).expect("count matches dims"));
    }
    if c.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_params<T: Scalar>(path: &Path, params: &[&Param<T>]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Load tensors into `params`, which must match in count and shapes.
pub fn load_params<T: Scalar>(path: &Path, params: &mut [&mut Param<T>]) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let tensors = read_checkpoint(std::io::BufReader::new(file))?;
    assign(&tensors, params)
}

pub(crate) fn assign<T: Scalar>(tensors: &[Tensor<f32>], params: &mut [&mut Param<T>]) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            params.len()
        )));
    }
    for (i, (t, p)) in tensors.iter().zip(params.iter_mut()).enumerate() {
        check_shape(t.shape(), p.value.shape(), &format!("checkpoint tensor {i}"))?;
        p.value = t.mapv(|v| T::of(f64::from(v)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let a = Param::new(Tensor::from_shape_vec(IxDyn(&[2, 3]), vec![1.0f32, -2.5, 3.0, 0.0, 1e-8, 7.0]).unwrap(), true);
        let b = Param::new(Tensor::from_shape_vec(IxDyn(&[1]), vec![0.25f32]).unwrap(), false);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[&a, &b]).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back[0], a.value);
        assert_eq!(back[1], b.value);
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut c = Param::new(Tensor::<f32>::zeros(IxDyn(&[3, 2])), true);
        let mut d = Param::new(Tensor::<f32>::zeros(IxDyn(&[1])), true);
        assert!(assign(&back, &mut [&mut c, &mut d]).is_err());
    }
}
