//! Binary netpbm I/O: PPM (`P6`) for RGB images and PGM (`P5`) for class
//! index masks, both 8-bit.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_bytes(path, &encode_ppm(width, height, rgb))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_bytes(path, &encode_pgm(width, height, gray))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Decoded raster: `(width, height, channels, samples)`.
pub type Raster = (usize, usize, usize, Vec<u8>);

pub fn decode(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ascii header")?.to_string());
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic {other}")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s}"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(format!("expected {need} samples, found {}", bytes.len().saturating_sub(pos)));
    }
    Ok((w, h, channels, bytes[pos..pos + need].to_vec()))
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Dataset { path: path.to_path_buf(), reason })
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
