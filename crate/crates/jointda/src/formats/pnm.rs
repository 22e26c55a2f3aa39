//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.

use std::path::Path;

use jointda_core::flow::Image;

use crate::error::{Error, Result};

/// Parses a `P5` or `P6` file into an image with values `byte / 255`.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM file".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments before every header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header number out of range")?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    pos += 1;
    let expected = width.checked_mul(height).and_then(|n| n.checked_mul(channels)).ok_or("image too large")?;
    let body = &bytes[pos..];
    if body.len() != expected {
        return Err(format!("expected {expected} pixel bytes, found {}", body.len()));
    }
    Image::new(height, width, channels, body.iter().map(|&b| f64::from(b) / 255.0).collect()).map_err(|e| e.to_string())
}

/// Serializes a 1- or 3-channel image, rounding to the nearest byte.
pub fn encode_pnm(image: &Image) -> std::result::Result<Vec<u8>, String> {
    let magic = match image.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(format!("{c}-channel images have no PGM/PPM form")),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|r| Error::format(path, r))
}

pub fn write_pnm(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode_pnm(image).map_err(|r| Error::format(path, r))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
