//! Flat binary tensor serialization ("FTEN"), used inside checkpoints.
//!
//! Layout: magic `FTEN`, version u32 LE, dtype tag u8, rank u32 LE, dims as
//! u64 LE, then raw little-endian element values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::real::{Dtype, Real};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FTEN";
const VERSION: u32 = 1;

pub fn write_tensor<T: Real, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.numel() * T::DTYPE.size_bytes());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::DTYPE.tag());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data().iter() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::Format("truncated tensor data".into()))?;
    Ok(buf)
}

/// Reads one serialized tensor. The stored dtype must match `T`;
/// cross-precision loads are rejected.
pub fn read_tensor<T: Real, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let header = read_exact(input, 4)?;
    if header != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(input, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let tag = read_exact(input, 1)?[0];
    let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::Format(format!("bad dtype tag {tag}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {dtype}, expected {}",
            T::DTYPE
        )));
    }
    let rank = u32::from_le_bytes(read_exact(input, 4)?.try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_exact(input, 8)?.try_into().unwrap()) as usize;
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let bytes = read_exact(input, numel * T::DTYPE.size_bytes())?;
    let data: Vec<T> =
        bytes.chunks_exact(T::DTYPE.size_bytes()).map(|c| T::read_le(c)).collect();
    Tensor::from_vec(data, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::from_vec(vec![1.5f64, -0.25, 1e-300, 3.7e200], &[2, 2]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f64> = read_tensor(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(*back.data(), *t.data());
    }

    #[test]
    fn truncated_file_is_clean_error() {
        let t = Tensor::from_vec(vec![1.0f32; 8], &[8]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        let r: Result<Tensor<f32>> = read_tensor(&mut Cursor::new(&buf));
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn cross_precision_rejected() {
        let t = Tensor::from_vec(vec![1.0f32; 4], &[4]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let r: Result<Tensor<f64>> = read_tensor(&mut Cursor::new(&buf));
        assert!(matches!(r, Err(Error::Format(_))));
    }
}
