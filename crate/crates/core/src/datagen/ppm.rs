//! Binary PPM (P6, maxval 255) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Encodes interleaved RGB bytes.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Reads one header token, skipping whitespace and `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<(usize, usize)> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(parse_err(*pos, "unexpected end of header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok((start, *pos))
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let (s, e) = header_token(bytes, pos)?;
    std::str::from_utf8(&bytes[s..e])
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(s, format!("invalid {what}")))
}

/// Decodes a P6 image into a channel-major `3×H×W` tensor with values in `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let (s, e) = header_token(bytes, &mut pos)?;
    if &bytes[s..e] != b"P6" {
        return Err(parse_err(s, "only binary PPM (P6) is supported"));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let max_at = pos;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(parse_err(max_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(pos, "missing whitespace after maxval")),
    }
    let n = width * height;
    let body = &bytes[pos..];
    if body.len() < n * 3 {
        return Err(parse_err(
            bytes.len(),
            format!("truncated pixel data: {} of {} bytes", body.len(), n * 3),
        ));
    }
    let mut data = vec![0.0; 3 * n];
    for (i, px) in body[..n * 3].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

/// Channel-major float tensor from interleaved RGB bytes.
pub fn rgb_to_tensor(width: usize, height: usize, rgb: &[u8]) -> Tensor {
    let n = width * height;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data).expect("rgb length")
}
