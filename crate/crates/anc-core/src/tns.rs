//! `.tns` binary tensor files.
//!
//! Little-endian layout, no padding:
//!
//! | bytes | content                               |
//! |-------|---------------------------------------|
//! | 0..4  | magic `ANCT`                          |
//! | 4     | version, currently 1                  |
//! | 5     | dtype code, 0 = f32, 1 = f64          |
//! | 6     | rank, 1..=5                           |
//! | 7     | reserved, 0                           |
//! | 8..   | `rank` x u32 extents, then the payload |

use std::fs;
use std::path::Path;

use crate::error::{AncError, Result};
use crate::tensor::{DType, DenseTensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"ANCT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

pub fn encode(t: &DenseTensor) -> Vec<u8> {
    let dtype = t.dtype();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.rank() + t.len() * dtype.size_of());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(t.rank() as u8);
    out.push(0);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DenseTensor> {
    let fmt = |m: String| AncError::Format(m);
    if bytes.len() < HEADER_LEN {
        return Err(fmt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    if bytes[4] != VERSION {
        return Err(fmt(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| fmt(format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(fmt(format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let dims_end = HEADER_LEN + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fmt("truncated extents".into()));
    }
    let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(fmt(format!("zero extent in {dims:?}")));
    }
    let count: usize = dims.iter().product();
    let payload = &bytes[dims_end..];
    let expected = count * dtype.size_of();
    if payload.len() != expected {
        return Err(fmt(format!(
            "payload of {} bytes, header {dims:?} {dtype:?} requires {expected}",
            payload.len()
        )));
    }
    match dtype {
        DType::F32 => DenseTensor::from_f32(
            &dims,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => DenseTensor::new(
            &dims,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    }
}

pub fn write(t: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| AncError::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| AncError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        AncError::Format(m) => AncError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
