//! Portable-pixmap images and small filesystem helpers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::segmenter::Frame;

/// Encodes an RGB frame as binary PPM (P6, maxval 255). Values are
/// rounded to the nearest of 256 levels.
pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let (h, w) = (frame.height(), frame.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = (frame.at(ch, r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    out
}

pub fn rgb_to_ppm(height: usize, width: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        out.extend_from_slice(px);
    }
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format(path, "bad PPM header"))
}

/// Decodes a P6 image into a frame with values `k / 255`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Frame> {
    let mut pos = 0;
    if header_token(bytes, &mut pos, path)? != "P6" {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    let num = |pos: &mut usize| -> Result<usize> {
        header_token(bytes, pos, path)?
            .parse()
            .map_err(|_| Error::format(path, "bad PPM header number"))
    };
    let w = num(&mut pos)?;
    let h = num(&mut pos)?;
    let maxval = num(&mut pos)?;
    if maxval != 255 {
        return Err(Error::format(path, "only maxval 255 is supported"));
    }
    pos += 1;
    let body = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| Error::format(path, "truncated PPM data"))?;
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * w * h + i] = px[ch] as f64 / 255.0;
        }
    }
    Frame::new(h, w, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Sorted subdirectories of `dir`.
pub fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}
