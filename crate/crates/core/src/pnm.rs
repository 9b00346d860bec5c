//! 8-bit binary PPM (P6) and PGM (P5) reading and writing.

use std::path::Path;

use mce_tensor::{Real, Tensor};

use crate::error::{MceError, Result};

fn to_byte(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, msg: impl Into<String>) -> MceError {
    MceError::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Encodes a `3×H×W` image with values in [0, 1].
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = image.shape()[..] else {
        return Err(MceError::contract(
            "encode_ppm",
            format!("expected 3×H×W, got {:?}", image.shape()),
        ));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + p]));
        }
    }
    Ok(out)
}

/// Encodes an `H×W` map with values in [0, 1]; binary masks become 0/255.
pub fn encode_pgm(mask: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = mask.shape()[..] else {
        return Err(MceError::contract(
            "encode_pgm",
            format!("expected H×W, got {:?}", mask.shape()),
        ));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
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
            return Err(image_err(path, "truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| image_err(path, "bad header"))?,
        );
    }
    if fields[0] != magic {
        return Err(image_err(
            path,
            format!("expected {magic}, found {}", fields[0]),
        ));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| image_err(path, format!("bad header field {s:?}")))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(image_err(path, "only non-empty 8-bit images are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((w, h, bytes.get(pos + 1..).unwrap_or(&[])))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (w, h, raster) = parse_header(bytes, "P6", path)?;
    if raster.len() != 3 * w * h {
        return Err(image_err(
            path,
            format!("raster has {} bytes, expected {}", raster.len(), 3 * w * h),
        ));
    }
    let mut d = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for c in 0..3 {
            d[c * w * h + p] = raster[3 * p + c] as Real / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], d)?)
}

/// Decodes a mask; any non-zero byte counts as foreground.
pub fn decode_pgm_mask(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (w, h, raster) = parse_header(bytes, "P5", path)?;
    if raster.len() != w * h {
        return Err(image_err(
            path,
            format!("raster has {} bytes, expected {}", raster.len(), w * h),
        ));
    }
    Ok(Tensor::new(
        vec![h, w],
        raster
            .iter()
            .map(|&b| if b > 0 { 1.0 } else { 0.0 })
            .collect(),
    )?)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| MceError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| MceError::io(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &encode_ppm(image)?)
}

pub fn write_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    write(path, &encode_pgm(mask)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read(path)?, path)
}

pub fn read_pgm_mask(path: &Path) -> Result<Tensor> {
    decode_pgm_mask(&read(path)?, path)
}
