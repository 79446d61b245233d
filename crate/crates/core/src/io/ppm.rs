//! Binary (P6) PPM with maxval 255.

use std::path::Path;

use super::bytes::{read_file, write_file};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Decodes P6 bytes into a `[3, H, W]` tensor with values `byte / 255`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |pos: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        msg: format!("{msg} (byte offset {pos})"),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "not a binary PPM (expected `P6`)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
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
            return Err(err(pos, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields[k] = text.parse().map_err(|_| err(start, format!("{name} `{text}` out of range")))?;
        if fields[k] == 0 {
            return Err(err(start, format!("{name} is zero")));
        }
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, format!("unsupported maxval {maxval} (only 255)")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected a single whitespace byte after maxval".into()));
    }
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() - pos != need {
        return Err(err(pos, format!("pixel data is {} bytes, expected {need}", bytes.len() - pos)));
    }
    let px = &bytes[pos..];
    let plane = w * h;
    Tensor::new(vec![3, h, w], (0..3 * plane).map(|i| px[(i % plane) * 3 + i / plane] as f32 / 255.0).collect())
}

/// Encodes a `[3, H, W]` (or `[1, 3, H, W]`) tensor, clamping to [0, 1] and
/// rounding half up.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    let (h, w) = match s {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => return Err(Error::Invalid(format!("PPM needs a [3, H, W] image, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = d[c * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0 + 0.5).floor() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read_file(path)?, path)
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    write_file(path, &encode_ppm(image)?)
}
