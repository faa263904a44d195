//! Binary portable pixmap (P6) and graymap (P5) files, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit gray or RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Raster {
    pub fn from_image(img: &Tensor) -> Result<Self> {
        let (h, w, c) = img.hwc()?;
        if c != 3 {
            return Err(Error::Shape(format!("P6 needs 3 channels, got {c}")));
        }
        Ok(Self { width: w, height: h, channels: 3, data: img.data().iter().map(|&v| quantize(v)).collect() })
    }

    pub fn gray(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} bytes for a {height}x{width} graymap", data.len())));
        }
        Ok(Self { width, height, channels: 1, data })
    }

    pub fn to_image(&self) -> Result<Tensor> {
        if self.channels != 3 {
            return Err(Error::Format("expected an RGB pixmap".into()));
        }
        Tensor::new(
            vec![self.height, self.width, 3],
            self.data.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        let channels = match magic.as_slice() {
            b"P6" => 3,
            b"P5" => 1,
            other => {
                return Err(Error::Format(format!(
                    "unsupported magic {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width = number(bytes, &mut pos)?;
        let height = number(bytes, &mut pos)?;
        let maxval = number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::Format(format!("maxval {maxval} unsupported, need 255")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("missing whitespace after header".into()));
        }
        pos += 1;
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(Error::Format(format!("truncated payload: {} of {need} bytes", payload.len())));
        }
        if payload.len() > need {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self { width, height, channels, data: payload.to_vec() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn token(b: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    loop {
        while *pos < b.len() && b[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < b.len() && b[*pos] == b'#' {
            while *pos < b.len() && b[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < b.len() && !b[*pos].is_ascii_whitespace() && b[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(b[start..*pos].to_vec())
}

fn number(b: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(b, pos)?;
    std::str::from_utf8(&t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad header field {:?}", String::from_utf8_lossy(&t))))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    Raster::read(path)?.to_image()
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    Raster::from_image(img)?.write(path)
}

/// Returns `(height, width, bytes)`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let r = Raster::read(path)?;
    if r.channels != 1 {
        return Err(Error::Format(format!("{} is not a graymap", path.display())));
    }
    Ok((r.height, r.width, r.data))
}

pub fn write_gray(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    Raster::gray(height, width, data.to_vec())?.write(path)
}
