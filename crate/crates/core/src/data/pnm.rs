//! Binary PPM (`P6`, RGB) and PGM (`P5`, gray) with 8-bit samples.
//!
//! Written headers are exactly `"P6\n{w} {h}\n255\n"` (or `P5`), followed by
//! `w·h·channels` bytes, pixel-interleaved, rows top to bottom. The reader
//! also accepts any whitespace between fields and `#` comments running to
//! the end of a line, as long as maxval is 255.

use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Encodes a `[3×H×W]` (PPM) or `[1×H×W]` (PGM) image with values in
/// `[0, 1]`; each sample becomes `round(clamp(v)·255)`.
pub fn encode_pnm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return dim_err(format!("expected [C×H×W], got {:?}", image.shape()));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return dim_err(format!("images need 1 or 3 channels, got {c}")),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            out.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return format_err("not a binary PPM/PGM file (expected magic P6 or P5)"),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return format_err(format!("header field {} is missing or not a number", ["width", "height", "maxval"][k]));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header number too large".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return format_err("header must end with a single whitespace byte"),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return format_err(format!("unsupported maxval {maxval} (only 255)"));
    }
    if width == 0 || height == 0 {
        return format_err("zero-sized image");
    }
    Ok(Header { channels, width, height, data_start: pos })
}

/// Decodes to `[C×H×W]` with values `byte / 255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let hd = parse_header(bytes)?;
    let n = hd.width * hd.height;
    let body = &bytes[hd.data_start..];
    if body.len() != n * hd.channels {
        return format_err(format!("expected {} pixel bytes, found {}", n * hd.channels, body.len()));
    }
    let mut data = vec![0.0; n * hd.channels];
    for i in 0..n {
        for ch in 0..hd.channels {
            data[ch * n + i] = body[i * hd.channels + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![hd.channels, hd.height, hd.width], data)
}

pub fn write_pnm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    std::fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<Tensor<f64>> {
    decode_pnm(&std::fs::read(path)?)
}
