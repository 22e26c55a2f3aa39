//! Flow fields on disk: `AFLW`, then `u32` LE height and width, then
//! `H * W * 2` LE `f32` values as `(F_x, F_y)` pairs in row-major order.

use std::path::Path;

use jointda_core::flow::FlowField;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AFLW";

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    out.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    for &v in flow.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> std::result::Result<FlowField, String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("missing AFLW header".into());
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (h, w) = (word(4), word(8));
    let count = h.checked_mul(w).and_then(|n| n.checked_mul(2)).ok_or("flow too large")?;
    let body = &bytes[12..];
    if Some(body.len()) != count.checked_mul(4) {
        return Err(format!("expected {count} values, found {} bytes", body.len()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    FlowField::new(h, w, data).map_err(|e| e.to_string())
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flow(&bytes).map_err(|r| Error::format(path, r))
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    std::fs::write(path, encode_flow(flow)).map_err(|e| Error::io(path, e))
}
