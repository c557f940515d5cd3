//! Binary 8-bit greyscale PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel.
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(
                "pgm",
                format!("{} pixels for a {width}x{height} image", pixels.len()),
            ));
        }
        Ok(Pgm { width, height, pixels })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Accepts `#` comments and arbitrary whitespace between header fields;
    /// exactly one whitespace byte separates the max value from the raster.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: &str| Error::Format {
            kind: "PGM",
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(fail(0, "expected magic number P5"));
        }
        let mut pos = 2;
        let mut field = |name: &str| -> Result<(usize, usize)> {
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
                return Err(fail(start, &format!("expected {name}")));
            }
            let v = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail(start, &format!("{name} out of range")))?;
            Ok((v, start))
        };
        let (width, _) = field("width")?;
        let (height, _) = field("height")?;
        let (maxval, at) = field("max value")?;
        if maxval != 255 {
            return Err(fail(at, &format!("max value {maxval} unsupported, need 255")));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fail(pos, "expected whitespace before raster"));
        }
        pos += 1;
        let need = width
            .checked_mul(height)
            .ok_or_else(|| fail(0, "image dimensions overflow"))?;
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(fail(
                bytes.len(),
                &format!("raster truncated: {} of {need} bytes", raster.len()),
            ));
        }
        Ok(Pgm {
            width,
            height,
            pixels: raster[..need].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Pgm::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Quantizes a 1x1xHxW map in [0, 1] to `round(v * 255)`; values outside
    /// the range saturate.
    pub fn from_unit_map(map: &Tensor) -> Result<Self> {
        let [n, c, h, w] = map.shape().dims();
        if n != 1 || c != 1 {
            return Err(Error::invalid("pgm", format!("expected a 1x1xHxW map, got {:?}", map.shape())));
        }
        let pixels = map
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Pgm::new(w, h, pixels)
    }

    /// 1x1xHxW map with values `byte / 255`.
    pub fn to_unit_map(&self) -> Tensor {
        let data = self.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("pixel count checked")
    }

    /// Targets are written as 255 and background as 0.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        let pixels = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
        Pgm {
            width: mask.width(),
            height: mask.height(),
            pixels,
        }
    }

    /// Any nonzero byte is a target pixel, so masks stored as 0/1 also load.
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::from_bits(self.height, self.width, self.pixels.iter().map(|&b| b != 0).collect())
            .expect("pixel count checked")
    }
}
