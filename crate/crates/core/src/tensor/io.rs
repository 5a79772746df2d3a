//! `GFT1` raw tensor files.
//!
//! Layout (little-endian): magic `GFT1`, `u32` rank, `rank` x `u32` extents,
//! `u8` dtype tag (0 = f32, 1 = f64), then the scalars in row-major order.

use std::io::{Read, Write};

use super::{DType, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GFT1";

/// A decoded tensor whose dtype is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn shape(&self) -> &Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type (exact when widening).
    pub fn into_typed<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_gft1<T: Scalar, W: Write>(tensor: &Tensor<T>, mut out: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(9 + 4 * tensor.dims().len() + tensor.numel() * T::DTYPE.size());
    encode(tensor, &mut buf);
    out.write_all(&buf)
}

pub(crate) fn encode<T: Scalar>(tensor: &Tensor<T>, buf: &mut Vec<u8>) {
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensor.dims().len() as u32).to_le_bytes());
    for &d in tensor.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(T::DTYPE.tag());
    for &v in tensor.data() {
        v.write_le(buf);
    }
}

pub fn read_gft1<R: Read>(mut input: R) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::format(format!("reading tensor: {e}")))?;
    let mut cursor = Cursor::new(&bytes);
    let t = decode(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::format("trailing bytes after tensor"));
    }
    Ok(t)
}

/// Byte cursor shared with the checkpoint reader.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn decode(cursor: &mut Cursor<'_>) -> Result<AnyTensor> {
    if cursor.take(4)? != MAGIC {
        return Err(Error::format("bad tensor magic, expected GFT1"));
    }
    let rank = cursor.u32()? as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::format(format!("tensor rank {rank} out of range")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(cursor.u32()? as usize);
    }
    let shape = Shape::new(&dims).map_err(|e| Error::format(e.to_string()))?;
    let tag = cursor.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::format(format!("unknown dtype tag {tag}")))?;
    let payload = cursor.take(shape.numel() * dtype.size())?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_shape(shape, read_values(payload))?),
        DType::F64 => AnyTensor::F64(Tensor::from_shape(shape, read_values(payload))?),
    })
}

fn read_values<T: Scalar>(payload: &[u8]) -> Vec<T> {
    payload
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_gft1(&t, &mut buf).unwrap();
        let mut want = b"GFT1".to_vec();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.push(0);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn round_trip_f64_bit_exact() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 1, 2], |i| (i as f64).sqrt() - 1.3).unwrap();
        let mut buf = Vec::new();
        write_gft1(&t, &mut buf).unwrap();
        match read_gft1(buf.as_slice()).unwrap() {
            AnyTensor::F64(back) => assert_eq!(back, t),
            other => panic!("wrong dtype {:?}", other.dtype()),
        }
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let t = Tensor::<f32>::full(&[3], 1.5).unwrap();
        let mut buf = Vec::new();
        write_gft1(&t, &mut buf).unwrap();
        assert!(read_gft1(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_gft1(bad.as_slice()).is_err());
        let mut bad_tag = buf.clone();
        bad_tag[12] = 7;
        assert!(read_gft1(bad_tag.as_slice()).is_err());
        let mut trailing = buf;
        trailing.push(0);
        assert!(read_gft1(trailing.as_slice()).is_err());
    }
}
