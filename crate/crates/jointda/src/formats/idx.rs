//! IDX arrays (the MNIST container): two zero bytes, a type byte, a rank
//! byte, big-endian `u32` extents, then the raw values.

use std::path::Path;

use jointda_core::tensor::Tensor;

use crate::error::{Error, Result};

/// Unsigned byte, the only element type accepted.
const TYPE_U8: u8 = 0x08;

/// Shape and raw bytes of an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl IdxArray {
    /// Values divided by 255.
    pub fn to_tensor(&self) -> jointda_core::Result<Tensor> {
        Tensor::new(self.shape.clone(), self.bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// Raw bytes as class indices.
    pub fn labels(&self) -> Vec<usize> {
        self.bytes.iter().map(|&b| usize::from(b)).collect()
    }
}

pub fn decode_idx(bytes: &[u8]) -> std::result::Result<IdxArray, String> {
    if bytes.len() < 4 {
        return Err("truncated magic".into());
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err("bad magic".into());
    }
    if bytes[2] != TYPE_U8 {
        return Err(format!("unsupported element type {:#04x}", bytes[2]));
    }
    let rank = usize::from(bytes[3]);
    if rank == 0 {
        return Err("rank must be positive".into());
    }
    let dims_end = 4 + 4 * rank;
    if bytes.len() < dims_end {
        return Err("truncated extents".into());
    }
    let shape: Vec<usize> = bytes[4..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("array too large")?;
    let body = &bytes[dims_end..];
    if body.len() < count {
        return Err(format!("truncated data: expected {count} bytes, found {}", body.len()));
    }
    if body.len() > count {
        return Err(format!("{} trailing bytes", body.len() - count));
    }
    Ok(IdxArray { shape, bytes: body.to_vec() })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_idx(&bytes).map_err(|r| Error::format(path, r))
}

/// Reads an IDX file as a tensor with values in `[0, 1]`.
pub fn load_idx(path: &Path) -> Result<Tensor> {
    Ok(read_idx(path)?.to_tensor()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_images_of_two_by_two() {
        let mut f = vec![0, 0, 0x08, 3];
        for d in [2u32, 2, 2] {
            f.extend(d.to_be_bytes());
        }
        f.extend([0u8, 51, 102, 153, 204, 255, 17, 34]);
        let t = decode_idx(&f).unwrap().to_tensor().unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data(), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 17.0 / 255.0, 34.0 / 255.0]);
    }

    #[test]
    fn label_vector() {
        let mut f = vec![0, 0, 0x08, 1];
        f.extend(3u32.to_be_bytes());
        f.extend([7u8, 0, 9]);
        let a = decode_idx(&f).unwrap();
        assert_eq!(a.shape, vec![3]);
        assert_eq!(a.labels(), vec![7, 0, 9]);
        assert_eq!(a.to_tensor().unwrap().shape(), &[3]);
    }

    #[test]
    fn malformed_files() {
        assert!(decode_idx(&[]).is_err());
        assert!(decode_idx(&[1, 0, 8, 1, 0, 0, 0, 1, 5]).is_err());
        assert!(decode_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 1, 5]).unwrap_err().contains("type"));
        assert!(decode_idx(&[0, 0, 8, 1, 0, 0]).is_err());
        assert!(decode_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2]).unwrap_err().contains("truncated"));
    }
}
