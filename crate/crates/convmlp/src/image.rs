//! Netpbm rasters: binary PGM (P5) output, P5/P6 input.

use std::path::Path;

use convmlp_core::{Real, Tensor};

use crate::error::{FormatError, Result};
use crate::persist::{decode_tensor, TENSOR_MAGIC};

/// 8-bit P5 image of a `[H, W]` map with values in `[0, 1]` (clamped).
pub fn encode_pgm<T: Real>(map: &Tensor<T>) -> Result<Vec<u8>> {
    let &[h, w] = map.shape() else {
        return Err(FormatError::Core(convmlp_core::Error::Dimension {
            op: "encode_pgm",
            detail: format!("expected a 2-D map, got {:?}", map.shape()),
        }));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm<T: Real>(path: &Path, map: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?).map_err(|e| FormatError::io(path, e))
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_at: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(FormatError::malformed(0, "not a binary PGM (P5) or PPM (P6) file")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments before each field
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
            return Err(match bytes.get(pos) {
                None => FormatError::Truncated { offset: pos, needed: 1, what: "image header".into() },
                Some(_) => FormatError::malformed(pos, "expected a decimal number in the header"),
            });
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| FormatError::malformed(start, "header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        None => return Err(FormatError::Truncated { offset: pos, needed: 1, what: "image header".into() }),
        Some(_) => return Err(FormatError::malformed(pos, "expected whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if !(1..=255).contains(&maxval) {
        return Err(FormatError::malformed(pos, format!("maxval {maxval} unsupported (1..=255)")));
    }
    if width == 0 || height == 0 {
        return Err(FormatError::malformed(pos, "zero image extent"));
    }
    Ok(Header { channels, width, height, maxval, data_at: pos })
}

/// Decodes P5/P6 into `[1, 3, H, W]` with values in `[0, 1]`; grey images
/// are replicated across the three channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let need = plane * h.channels;
    let data = &bytes[h.data_at..];
    if data.len() < need {
        return Err(FormatError::Truncated { offset: bytes.len(), needed: need - data.len(), what: "pixel data".into() });
    }
    let scale = 1.0 / h.maxval as f32;
    let mut out = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if h.channels == 1 { data[p] } else { data[p * 3 + c] };
            out[c * plane + p] = (src as f32 * scale).min(1.0);
        }
    }
    Ok(Tensor::from_vec(&[1, 3, h.height, h.width], out)?)
}

/// Reads an image from a PGM/PPM file or a tensor file holding `[3, H, W]`
/// or `[1, 3, H, W]`; the format is chosen by the leading magic bytes.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    if bytes.starts_with(&TENSOR_MAGIC) {
        let rec = decode_tensor(&bytes)?;
        let t = rec.decode_as_f32()?;
        return match *t.shape() {
            [3, h, w] => Ok(t.reshape(&[1, 3, h, w])?),
            [1, 3, _, _] => Ok(t),
            ref s => Err(FormatError::malformed(rec.offset, format!("image tensor must be [3,H,W] or [1,3,H,W], got {s:?}"))),
        };
    }
    decode_pnm(&bytes)
}
