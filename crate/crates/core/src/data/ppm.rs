//! Binary (P6) portable pixmap reading and writing, maxval 255 only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Splits the header into its four whitespace-separated fields (magic, width,
/// height, maxval), skipping `#` comments, and returns the pixel data offset.
fn header_fields(bytes: &[u8]) -> Option<([&[u8]; 4], usize)> {
    let mut fields: [&[u8]; 4] = [&[]; 4];
    let mut pos = 0;
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos)? {
                b'#' => {
                    while *bytes.get(pos)? != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            pos += 1;
        }
        *field = &bytes[start..pos];
    }
    // exactly one whitespace byte separates maxval from the raster
    bytes.get(pos).filter(|c| c.is_ascii_whitespace())?;
    Some((fields, pos + 1))
}

fn parse_num(field: &[u8]) -> Option<usize> {
    std::str::from_utf8(field).ok()?.parse().ok()
}

/// Decodes a P6 image into a 3×H×W tensor scaled to [0, 1].
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |d: String| Error::Data(format!("unsupported image header: {d}"));
    if !bytes.starts_with(b"P6") {
        return Err(bad("expected binary PPM magic `P6`".into()));
    }
    let (fields, offset) = header_fields(bytes).ok_or_else(|| bad("truncated header".into()))?;
    let (w, h, maxval) = match (parse_num(fields[1]), parse_num(fields[2]), parse_num(fields[3])) {
        (Some(w), Some(h), Some(m)) if w > 0 && h > 0 => (w, h, m),
        _ => return Err(bad("malformed width, height or maxval".into())),
    };
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval}, only 255 is supported")));
    }
    let raster = &bytes[offset..];
    if raster.len() < w * h * 3 {
        return Err(Error::Data(format!(
            "pixel data holds {} bytes, {w}×{h} RGB needs {}",
            raster.len(),
            w * h * 3
        )));
    }
    let scale = T::of(1.0 / 255.0);
    let mut data = vec![T::zero(); 3 * h * w];
    for (p, rgb) in raster[..w * h * 3].chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = T::of(f64::from(rgb[c])) * scale;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

/// Encodes a 3×H×W tensor with values in [0, 1] (clamped) as P6.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::shape("encode_ppm", format!("expected 3×H×W, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + p].as_f64().clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}
