//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, w: usize, h: usize, pixels: Vec<u8>) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// `[3, H, W]` in `[0, 1]` as P6 bytes.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(dim_err!("PPM needs a [3, H, W] image, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let pixels = (0..h * w).flat_map(|i| (0..3).map(move |c| quantize(d[c * h * w + i]))).collect();
    Ok(encode("P6", w, h, pixels))
}

/// `[1, H, W]` (or `[H, W]`) in `[0, 1]` as P5 bytes; 1.0 maps to 255.
pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = map.shape();
    let (h, w) = match s {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(dim_err!("PGM needs a [1, H, W] map, got {s:?}")),
    };
    Ok(encode("P5", w, h, map.data().iter().map(|&v| quantize(v)).collect()))
}

/// Parses the header, returning `(magic, width, height, payload)`.
fn decode(bytes: &[u8]) -> Result<(String, usize, usize, &[u8])> {
    let mut fields = Vec::new();
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
            return Err(Error::Data("truncated image header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad image header field {s:?}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(Error::Data(format!("unsupported image: {w}x{h}, maxval {maxval}")));
    }
    Ok((fields[0].clone(), w, h, bytes.get(pos..).unwrap_or(&[])))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (magic, w, h, px) = decode(bytes)?;
    if magic != "P6" || px.len() != 3 * w * h {
        return Err(Error::Data(format!("not a {w}x{h} binary PPM")));
    }
    let plane = w * h;
    Tensor::new([3, h, w], (0..3 * plane).map(|j| px[(j % plane) * 3 + j / plane] as f32 / 255.0).collect())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (magic, w, h, px) = decode(bytes)?;
    if magic != "P5" || px.len() != w * h {
        return Err(Error::Data(format!("not a {w}x{h} binary PGM")));
    }
    Tensor::new([1, h, w], px.iter().map(|&v| v as f32 / 255.0).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    decode_pgm(&read(path)?)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write(path, &encode_ppm(image)?)
}

pub fn write_pgm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    write(path, &encode_pgm(map)?)
}
