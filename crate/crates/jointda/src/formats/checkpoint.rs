//! Flat checkpoints of named tensors. Each record is a `u16` LE name length,
//! the UTF-8 name, a `u8` rank, `u32` LE extents and `f32` LE values.

use std::path::Path;

use jointda_core::tensor::Tensor;

use crate::error::{Error, Result};

pub fn encode_checkpoint<'a>(tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| format!("tensor name too long: {name}"))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| format!("rank too large: {name}"))?;
        out.extend(len.to_le_bytes());
        out.extend(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend(u32::try_from(d).map_err(|_| format!("extent too large: {name}"))?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut pos = 0;
    fn take<'b>(bytes: &'b [u8], pos: &mut usize, n: usize) -> std::result::Result<&'b [u8], String> {
        let s = bytes.get(*pos..*pos + n).ok_or("truncated checkpoint")?;
        *pos += n;
        Ok(s)
    }
    let mut out = Vec::new();
    while pos < bytes.len() {
        let l = take(bytes, &mut pos, 2)?;
        let len = usize::from(u16::from_le_bytes([l[0], l[1]]));
        let name = String::from_utf8(take(bytes, &mut pos, len)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let rank = usize::from(take(bytes, &mut pos, 1)?[0]);
        let shape: Vec<usize> = take(bytes, &mut pos, 4 * rank)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
        let values = take(bytes, &mut pos, count.checked_mul(4).ok_or("tensor too large")?)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Copies stored tensors into `targets` by name. Every target must be
/// present with the same shape; extra stored tensors are an error too.
pub fn restore<'a>(stored: Vec<(String, Tensor)>, targets: impl IntoIterator<Item = (String, &'a mut Tensor)>) -> std::result::Result<(), String> {
    let mut stored: std::collections::BTreeMap<String, Tensor> = stored.into_iter().collect();
    for (name, t) in targets {
        let s = stored.remove(&name).ok_or_else(|| format!("checkpoint lacks {name}"))?;
        if s.shape() != t.shape() {
            return Err(format!("{name}: checkpoint shape {:?} but model expects {:?}", s.shape(), t.shape()));
        }
        t.data_mut().copy_from_slice(s.data());
    }
    match stored.keys().next() {
        Some(extra) => Err(format!("checkpoint has unexpected tensor {extra}")),
        None => Ok(()),
    }
}

pub fn write_checkpoint<'a>(path: &Path, tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> Result<()> {
    let bytes = encode_checkpoint(tensors).map_err(|r| Error::format(path, r))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|r| Error::format(path, r))
}
