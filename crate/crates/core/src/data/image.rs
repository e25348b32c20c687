//! Binary portable pixmaps (P6) in, graymaps (P5) out.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parses a P6 file into a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "not a binary portable pixmap (P6)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments between header fields
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
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(start as u64, format!("bad header field {}", ["width", "height", "maxval"][i])))?;
    }
    let [width, height, maxval] = fields;
    if maxval > 255 {
        return Err(Error::format(pos as u64, format!("maxval {maxval} is not 8-bit")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "missing whitespace after header"));
    }
    pos += 1;
    let n = width * height;
    let pixels = &bytes[pos..];
    if pixels.len() != 3 * n {
        return Err(Error::format(
            pos as u64,
            format!("expected {} pixel bytes, found {}", 3 * n, pixels.len()),
        ));
    }
    let mut data = vec![0.0; 3 * n];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / maxval as f64;
        }
    }
    Tensor::new(&[3, height, width], data)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` tensor as P6, clamping to `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::dim("encode_ppm", format!("expected [3, H, W], got {s:?}"))),
    };
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    let d = image.data();
    for i in 0..n {
        out.extend((0..3).map(|c| quantize(d[c * n + i])));
    }
    Ok(out)
}

/// Encodes a `[H, W]` map as an 8-bit P5 graymap, scaled so the maximum is white.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|v| quantize(v * scale)));
    Ok(out)
}
