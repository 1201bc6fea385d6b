//! Tensor file format:
//!
//! ```text
//! "TSR1" | dtype u8 (1 = f32, 2 = f64) | ndim u8 | dims: ndim × u64 LE | data LE, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TSR1";

pub fn encode<F: Real>(t: &Tensor<F>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(F::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Decodes one tensor starting at `bytes[0]`; returns it with the number of
/// bytes consumed. `base` is added to reported offsets.
pub fn decode<F: Real>(bytes: &[u8], base: usize) -> Result<(Tensor<F>, usize)> {
    let fail = |offset: usize, msg: String| Error::Format {
        offset: base + offset,
        msg,
    };
    if bytes.len() < 6 {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| fail(4, format!("unknown dtype code {}", bytes[4])))?;
    if dtype != F::DTYPE {
        return Err(fail(4, format!("stored {dtype:?}, expected {:?}", F::DTYPE)));
    }
    let ndim = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let chunk = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| fail(bytes.len(), "truncated dimensions".into()))?;
        let d = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| fail(pos, format!("dimension {d} too large")))?);
        pos += 8;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(6, "element count overflows".into()))?;
    let width = dtype.size();
    let need = numel
        .checked_mul(width)
        .and_then(|n| n.checked_add(pos))
        .ok_or_else(|| fail(6, "payload size overflows".into()))?;
    if bytes.len() < need {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: {} of {} bytes", bytes.len() - pos, need - pos),
        ));
    }
    let data = bytes[pos..need].chunks_exact(width).map(F::read_le).collect();
    let t = Tensor::new(shape, data).map_err(|e| fail(6, e.to_string()))?;
    Ok((t, need))
}

pub fn tensor_file_write<F: Real>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + t.numel() * F::DTYPE.size());
    encode(t, &mut out);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`tensor_file_write`]; trailing bytes are an error.
pub fn tensor_file_read<F: Real>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            offset: used,
            msg: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}
