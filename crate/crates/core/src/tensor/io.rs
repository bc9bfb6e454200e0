//! The `TSR1` tensor container.
//!
//! Layout: magic `TSR1`, one dtype byte (0 = f64, 1 = u8), one rank byte,
//! `rank` little-endian u64 extents, then the little-endian payload with
//! no padding and nothing after it.

use super::Tensor;
use crate::error::{Error, Result};
use std::path::Path;

pub const TSR_MAGIC: &[u8; 4] = b"TSR1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    U8 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// A decoded container: the tensor plus the dtype it was stored with.
#[derive(Clone, Debug, PartialEq)]
pub struct TsrTensor {
    pub dtype: DType,
    pub tensor: Tensor,
}

pub fn encode_tsr(tensor: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if tensor.rank() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("rank {} too large for TSR1", tensor.rank())));
    }
    let mut out = Vec::with_capacity(6 + 8 * tensor.rank() + tensor.numel() * dtype.width());
    out.extend_from_slice(TSR_MAGIC);
    out.push(dtype as u8);
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::U8 => {
            for &v in tensor.data() {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "value {v} cannot be stored as u8"
                    )));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
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
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }
}

pub fn decode_tsr(bytes: &[u8]) -> Result<TsrTensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != TSR_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}") });
    }
    let dtype = match cur.take(1, "dtype")?[0] {
        0 => DType::F64,
        1 => DType::U8,
        other => {
            return Err(Error::Format { offset: 4, message: format!("unknown dtype code {other}") })
        }
    };
    let rank = cur.take(1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let offset = cur.pos;
        let raw = u64::from_le_bytes(cur.take(8, "extent")?.try_into().unwrap());
        let extent = usize::try_from(raw).ok().filter(|&e| e > 0).ok_or_else(|| Error::Format {
            offset,
            message: format!("invalid extent {raw}"),
        })?;
        count = count.checked_mul(extent).ok_or_else(|| Error::Format {
            offset,
            message: "element count overflows".into(),
        })?;
        shape.push(extent);
    }
    let payload_len = count.checked_mul(dtype.width()).ok_or_else(|| Error::Format {
        offset: cur.pos,
        message: "payload size overflows".into(),
    })?;
    let payload = cur.take(payload_len, "payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            message: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::U8 => payload.iter().map(|&b| b as f64).collect(),
    };
    Ok(TsrTensor { dtype, tensor: Tensor::from_parts(shape, data) })
}

pub fn write_tsr(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode_tsr(tensor, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tsr(path: &Path) -> Result<TsrTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tsr(&bytes)
}
