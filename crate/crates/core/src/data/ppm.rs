//! Binary PPM (P6), 8 bits per channel. A value `v` in `[0, 1]` is stored as
//! `floor(v·255 + 0.5)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor() as u8
}

pub fn encode<F: Real>(image: &Tensor<F>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dim("image_write", format!("image shape {s:?}, expected [H,W,3]")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.reserve(image.numel());
    for (i, &v) in image.data().iter().enumerate() {
        let v = v.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("pixel value {v} at index {i} outside [0, 1]")));
        }
        out.push(quantize(v));
    }
    Ok(out)
}

pub fn image_write<F: Real>(path: impl AsRef<Path>, image: &Tensor<F>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a P6 image with maxval 255 into `[H,W,3]` values `byte / 255`.
pub fn decode<F: Real>(bytes: &[u8]) -> Result<Tensor<F>> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = bytes.get(..2);
    if magic != Some(b"P6") {
        return Err(Error::Format {
            offset: 0,
            msg: "not a binary PPM (expected P6)".into(),
        });
    }
    pos += 2;
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while !matches!(bytes.get(pos), Some(b'\n') | None) {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(Error::Format {
                offset: start,
                msg: "malformed PPM header".into(),
            })?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format {
            offset: pos,
            msg: "missing whitespace after header".into(),
        });
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format {
            offset: pos,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    let need = w * h * 3;
    let payload = bytes.get(pos..pos + need).ok_or(Error::Format {
        offset: bytes.len(),
        msg: format!("truncated pixel data: need {need} bytes"),
    })?;
    let scale = 1.0 / 255.0;
    Tensor::new(vec![h, w, 3], payload.iter().map(|&b| F::lit(b as f64 * scale)).collect())
}

pub fn image_read<F: Real>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Layout {
            path: path.to_path_buf(),
            msg: format!("byte {offset}: {msg}"),
        },
        other => other,
    })
}
