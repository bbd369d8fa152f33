//! `EQT1` binary tensor records.
//!
//! Layout (little-endian): magic `EQT1`, `u32` rank, `rank x u64` extents,
//! `u8` dtype code (0 = f32, 1 = f64), then the raw row-major buffer. Files
//! holding several tensors simply concatenate records.

use std::io::{Read, Write};

use super::{numel, DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EQT1";

/// A decoded record whose element type is only known at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type (exact when the types match).
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 + 8 * t.rank() + 1 + t.numel() * T::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    buf.push(T::DTYPE.code());
    for &x in t.data() {
        x.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_tensors<T: Scalar, W: Write>(out: &mut W, ts: &[Tensor<T>]) -> Result<()> {
    ts.iter().try_for_each(|t| write_tensor(out, t))
}

fn read_exact_or_eof<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = input.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Format("truncated EQT1 header".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn decode<T: Scalar>(shape: Vec<usize>, raw: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size();
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_parts(shape, data)
}

/// Reads the next record, or `None` at a clean end of stream.
pub fn read_next<R: Read>(input: &mut R) -> Result<Option<AnyTensor>> {
    let mut magic = [0u8; 4];
    if !read_exact_or_eof(input, &mut magic)? {
        return Ok(None);
    }
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        input.read_exact(&mut ext)?;
        let e = u64::from_le_bytes(ext) as usize;
        if e == 0 {
            return Err(Error::Format("zero extent".into()));
        }
        shape.push(e);
    }
    let mut code = [0u8; 1];
    input.read_exact(&mut code)?;
    let dtype = DType::from_code(code[0])?;
    let count = numel(&shape);
    let mut raw = vec![0u8; count * dtype.size()];
    input
        .read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated EQT1 buffer: {e}")))?;
    Ok(Some(match dtype {
        DType::F32 => AnyTensor::F32(decode(shape, &raw)),
        DType::F64 => AnyTensor::F64(decode(shape, &raw)),
    }))
}

/// Reads exactly one record and converts it to `T`.
pub fn read_tensor<T: Scalar, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    read_next(input)?
        .map(AnyTensor::into_tensor)
        .ok_or_else(|| Error::Format("empty EQT1 stream".into()))
}

/// Reads every record until end of stream.
pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<AnyTensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_next(input)? {
        out.push(t);
    }
    Ok(out)
}
