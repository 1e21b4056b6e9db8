//! `TNS1` array container: magic, u32 rank, u32 dims, row-major f64 payload
//! (all little-endian).

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNS1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorIoError {
    #[error("bad magic, expected TNS1")]
    BadMagic,
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

pub fn write_tensor(array: &ArrayD<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * array.ndim() + 8 * array.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
    for &d in array.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads one container starting at `buf[0]`; returns the array and the number
/// of bytes consumed.
pub fn read_tensor_prefix(buf: &[u8]) -> Result<(ArrayD<f64>, usize), TensorIoError> {
    if buf.len() < 8 {
        return Err(TensorIoError::Truncated("header".into()));
    }
    if &buf[..4] != TENSOR_MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    let rank = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let dims_end = 8 + 4 * rank;
    if buf.len() < dims_end {
        return Err(TensorIoError::Truncated("dims".into()));
    }
    let dims: Vec<usize> = buf[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let end = dims_end + 8 * n;
    if buf.len() < end {
        return Err(TensorIoError::Truncated(format!("payload needs {n} values")));
    }
    let data: Vec<f64> = buf[dims_end..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let array = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length matches dims");
    Ok((array, end))
}

pub fn read_tensor(buf: &[u8]) -> Result<ArrayD<f64>, TensorIoError> {
    let (a, used) = read_tensor_prefix(buf)?;
    if used != buf.len() {
        return Err(TensorIoError::TrailingBytes(buf.len() - used));
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![1.0, -2.5]).unwrap();
        let bytes = write_tensor(&a);
        assert_eq!(&bytes[..12], b"TNS1\x02\0\0\0\x02\0\0\0");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 16);
        assert_eq!(read_tensor(&bytes).unwrap(), a);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(read_tensor(b"TNS2\0\0\0\0").unwrap_err(), TensorIoError::BadMagic);
        let a = ArrayD::<f64>::zeros(IxDyn(&[3]));
        let mut b = write_tensor(&a);
        b.push(0);
        assert_eq!(read_tensor(&b).unwrap_err(), TensorIoError::TrailingBytes(1));
        assert!(read_tensor(&b[..10]).is_err());
    }
}
